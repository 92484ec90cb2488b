import math
import random
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from gweval.errors import DegenerateVarianceError, InputDomainError
from gweval.geometry import BoundingBox, CanvasSize
from gweval.ingest import Detection, DomainManifest, GroundTruthSet, ImageAnnotation, PredictionSet
from gweval.matching import DEFAULT_THRESHOLDS
from gweval.metrics import (
    ImageScore,
    anova_domains,
    domain_aggregates,
    evaluate,
    f_survival,
    kaggle_accuracy,
    missed_size_histogram,
    one_way_anova,
    weighted_accuracy,
)


def score(image_id, domain, acc, counts=(0, 0, 0)):
    return ImageScore(image_id, domain, acc, DEFAULT_THRESHOLDS, (counts,) * len(DEFAULT_THRESHOLDS))


def scores_from(groups):
    out = []
    for d, accs in groups.items():
        out += [score(f"{d}{i}", d, a) for i, a in enumerate(accs)]
    return out


def test_kaggle_examples():
    assert kaggle_accuracy(scores_from({"a": [1.0, 0.5, 0.0]})) == 0.5
    assert kaggle_accuracy(scores_from({"a": [0.6897]})) == 0.6897
    assert kaggle_accuracy(scores_from({"a": [0.37] * 7})) == 0.37
    with pytest.raises(InputDomainError):
        kaggle_accuracy([])


def test_weighted_two_domain_example():
    s = scores_from({"A": [1.0, 0.5], "B": [0.0]})
    assert weighted_accuracy(s) == 0.375
    assert kaggle_accuracy(s) == 0.5


def test_weighted_uses_manifest_and_names_missing_image():
    s = scores_from({"A": [1.0, 0.5], "B": [0.0]})
    manifest = DomainManifest({"A0": "x", "A1": "y", "B0": "y"})
    assert weighted_accuracy(s, manifest) == (1.0 + 0.25) / 2
    with pytest.raises(InputDomainError, match="B0"):
        weighted_accuracy(s, DomainManifest({"A0": "x", "A1": "x"}))


def test_equal_domain_sizes_give_identical_metrics():
    rng = random.Random(11)
    for _ in range(300):
        d, m = rng.randint(1, 6), rng.randint(1, 8)
        groups = {f"d{k}": [rng.random() for _ in range(m)] for k in range(d)}
        s = scores_from(groups)
        assert weighted_accuracy(s) == kaggle_accuracy(s)


def test_single_domain_weighted_equals_kaggle():
    s = scores_from({"only": [0.1, 0.9, 0.33, 0.5]})
    assert weighted_accuracy(s) == kaggle_accuracy(s)


def test_permutation_and_duplication_invariance():
    rng = random.Random(4)
    for _ in range(100):
        groups = {f"d{k}": [rng.random() for _ in range(rng.randint(1, 5))] for k in range(rng.randint(1, 4))}
        s = scores_from(groups)
        w, k = weighted_accuracy(s), kaggle_accuracy(s)
        shuffled = s[:]
        rng.shuffle(shuffled)
        assert weighted_accuracy(shuffled) == w and kaggle_accuracy(shuffled) == k
        assert 0 <= w <= 1 and 0 <= k <= 1
        target = rng.choice(list(groups))
        copies = rng.randint(2, 4)
        dup = [x for x in s if x.domain != target]
        for c in range(copies):
            dup += [score(f"{x.image_id}#{c}", x.domain, x.accuracy) for x in s if x.domain == target]
        assert weighted_accuracy(dup) == w


def test_domain_aggregates_examples():
    perfect = [score(f"p{i}", "P", 1.0, (2, 0, 0)) for i in range(3)]
    mixed = [score("m0", "M", 0.4, (2, 1, 0)), score("m1", "M", 0.6, (1, 0, 1))]
    aggs = domain_aggregates(perfect + mixed)
    assert [a.domain for a in aggs] == ["M", "P"]
    m, p = aggs
    assert (p.mean_accuracy, p.std_accuracy, p.missed_rate, p.false_positive_rate) == (1.0, 0.0, 0.0, 0.0)
    assert m.missed_rate == 0.25 and m.false_positive_rate == 0.25
    assert m.n == 2 and m.mean_accuracy == 0.5
    assert m.std_accuracy == pytest.approx(0.1, abs=1e-15)


def test_domain_aggregates_flag_zero_denominator():
    (agg,) = domain_aggregates([score("e", "E", 1.0, (0, 0, 0))])
    assert agg.missed_rate == 0.0 and agg.false_positive_rate == 0.0
    assert set(agg.flags) == {"missed_rate_undefined", "fp_rate_undefined"}


def test_anova_exact_example():
    f, df_b, df_w = one_way_anova([[Fraction(0), Fraction(1, 5)], [Fraction(4, 5), Fraction(1)]])
    assert f == 32 and isinstance(f, Fraction)
    assert (df_b, df_w) == (1, 2)
    f_float, _, _ = one_way_anova([[0.0, 0.2], [0.8, 1.0]])
    assert f_float == pytest.approx(32, rel=1e-12)


def test_anova_identical_groups():
    f, _, _ = one_way_anova([[0.2, 0.4], [0.2, 0.4]])
    assert f == 0
    res = anova_domains(scores_from({"a": [0.0, 1.0], "b": [0.0, 1.0]}))
    assert res.f_statistic == 0 and res.p_value == 1.0


def test_anova_errors():
    with pytest.raises(InputDomainError):
        anova_domains(scores_from({"a": [0.1, 0.2, 0.3]}))
    with pytest.raises(DegenerateVarianceError):
        one_way_anova([[0.5, 0.5], [0.7, 0.7]])
    with pytest.raises(InputDomainError):
        one_way_anova([[0.5], [0.7, 0.1]])


def f_tail_by_quadrature(f, d1, d2):
    d1, d2 = mpmath.mpf(d1), mpmath.mpf(d2)

    def pdf(x):
        return mpmath.sqrt((d1 * x) ** d1 * d2**d2 / (d1 * x + d2) ** (d1 + d2)) / (x * mpmath.beta(d1 / 2, d2 / 2))

    return float(mpmath.quad(pdf, [f, mpmath.inf]))


@pytest.mark.parametrize("f, d1, d2", [(32.0, 1, 2), (2.5, 3, 20), (0.7, 2, 5), (10.0, 4, 100), (1.0, 26, 400)])
def test_f_survival_against_quadrature(f, d1, d2):
    assert f_survival(f, d1, d2) == pytest.approx(f_tail_by_quadrature(f, d1, d2), rel=1e-8, abs=1e-14)


def test_anova_affine_invariance():
    rng = random.Random(8)
    for _ in range(50):
        groups = [[rng.random() for _ in range(rng.randint(2, 6))] for _ in range(rng.randint(2, 5))]
        f0, _, _ = one_way_anova(groups)
        shift, scale = rng.uniform(-5, 5), rng.uniform(0.01, 100)
        f1, _, _ = one_way_anova([[v * scale + shift for v in g] for g in groups])
        assert f1 == pytest.approx(f0, rel=1e-9)


def _gt(images):
    return GroundTruthSet({k: ImageAnnotation(CanvasSize(100, 100), tuple(v)) for k, v in images.items()})


def test_missed_size_histogram_example():
    gt = _gt({"a": [BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 70, 70)]})
    preds = PredictionSet("p", {"a": (Detection(BoundingBox(50, 50, 70, 70), 0.9),)})
    report = evaluate(gt, preds, {"a": "d"}, retain_pairs=True)
    h = report.size_histogram
    assert sum(h.all_counts) == 2 and sum(h.missed_counts) == 1
    assert h.median_ratio == pytest.approx(10 / math.sqrt(250), rel=1e-12)
    assert len(h.edges) == 33 and h.edges[0] == 0.0
    assert h.edges[-1] == pytest.approx(np.percentile([10.0, 20.0], 99))


def test_histogram_nothing_missed_and_everything_missed():
    boxes = [BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 50, 50)]
    gt = _gt({"a": boxes})
    perfect = evaluate(gt, PredictionSet("p", {"a": tuple(Detection(b, 1.0) for b in boxes)}), {"a": "d"}, retain_pairs=True)
    assert sum(perfect.size_histogram.missed_counts) == 0
    assert perfect.size_histogram.median_ratio is None
    empty = evaluate(gt, PredictionSet("p", {}), {"a": "d"}, retain_pairs=True)
    assert empty.size_histogram.missed_counts == empty.size_histogram.all_counts


def test_histogram_needs_pairs():
    with pytest.raises(InputDomainError, match="pair"):
        missed_size_histogram([score("a", "d", 1.0)], _gt({"a": []}))


def test_histogram_missed_total_equals_fn_at_05():
    rng = random.Random(21)
    from conftest import random_instance

    images, preds = {}, {}
    for i in range(40):
        g, p = random_instance(rng, max_boxes=20)
        images[f"i{i}"] = g
        preds[f"i{i}"] = tuple(p)
    gt = _gt(images)
    report = evaluate(gt, PredictionSet("p", preds), {k: "d" for k in images}, retain_pairs=True)
    fn = sum(s.counts_at(0.5)[2] for s in report.images)
    assert sum(report.size_histogram.missed_counts) == fn
    assert sum(report.size_histogram.all_counts) == sum(len(v) for v in images.values())


def test_evaluate_two_domain_fixture():
    box = BoundingBox(10, 10, 40, 40)
    gt = _gt({"i1": [box], "i2": [box], "i3": [box]})
    preds = PredictionSet(
        "p",
        {
            "i1": (Detection(box, 0.9),),
            "i2": (Detection(box, 0.9), Detection(BoundingBox(60, 60, 90, 90), 0.5)),
            "i3": (),
        },
    )
    report = evaluate(gt, preds, {"i1": "A", "i2": "A", "i3": "B"})
    assert [s.accuracy for s in report.images] == [1.0, 0.5, 0.0]
    assert report.kaggle_accuracy == 0.5 and report.weighted_accuracy == 0.375
    assert report.n == 3 and report.D == 2


def test_evaluate_missing_domain_and_missing_predictions():
    gt = _gt({"a": [BoundingBox(0, 0, 5, 5)], "b": []})
    with pytest.raises(InputDomainError, match="b"):
        evaluate(gt, PredictionSet("p", {}), {"a": "d"})
    report = evaluate(gt, PredictionSet("p", {"zzz": ()}), {"a": "d", "b": "d"})
    assert report.warnings["missing_prediction_images"] == 2
    assert report.warnings["unknown_prediction_images"] == 1
