import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaslab.ablation import (
    AblationReport,
    FinetuneSelection,
    LayerAblation,
    SimilarityScores,
    UntrainedProbeError,
    ablation_size,
    filter_similarity,
    run_ablation_study,
    select_ablation_set,
    select_finetune_layers,
)
from debiaslab.model import FilterMask, build_model
from helpers import PLANTED_LAYER, planted_watermark_data, planted_watermark_model

# ---------------------------------------------------------------------------
# similarity and masks
# ---------------------------------------------------------------------------


def test_similarity_two_filters_at_45_degrees():
    s = filter_similarity(np.array([[1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(s.scores, [1 / math.sqrt(2)] * 2, rtol=0, atol=1e-15)


def test_identical_filters_score_one():
    w = np.tile(np.array([0.3, -1.2, 2.0]), (4, 1)).reshape(4, 1, 1, 3)
    np.testing.assert_allclose(filter_similarity(w).scores, 1.0, atol=1e-12)


def test_identical_pair_holds_top_two():
    w = np.array([[0.0, 0.0, 1.0], [1.0, 2.0, 0.0], [1.0, 2.0, 0.0]])
    s = filter_similarity(w).scores
    assert set(np.argsort(-s)[:2]) == {1, 2}
    assert s[1] == s[2]


def test_zero_norm_filter_scores_minus_one():
    s = filter_similarity(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])).scores
    assert s[0] == -1.0 and s[1] > -1.0


def test_single_filter_rejected():
    with pytest.raises(ValueError):
        filter_similarity(np.ones((1, 1, 3, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
def test_similarity_permutes_with_filters(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, 2, 3, 3))
    perm = rng.permutation(n)
    s = filter_similarity(w).scores
    np.testing.assert_allclose(filter_similarity(w[perm]).scores, s[perm], rtol=0, atol=1e-12)
    assert np.all((s >= -1) & (s <= 1))


@pytest.mark.parametrize("n, expected", [(20, 2), (5, 1), (8, 1), (16, 2), (32, 3), (2, 1)])
def test_mask_size_law(n, expected):
    assert ablation_size(n, 0.10) == expected
    rng = np.random.default_rng(n)
    mask = select_ablation_set(SimilarityScores(0, rng.uniform(-1, 1, n)), 0.10)
    assert len(mask.indices) == expected


def test_mask_ties_go_to_lowest_index():
    mask = select_ablation_set(SimilarityScores(3, np.array([0.1, 0.9, 0.9, 0.9, 0.2] * 4)), 0.10)
    assert mask.layer_id == 3 and list(mask.indices) == [1, 2]


def test_mask_picks_highest_scores():
    mask = select_ablation_set(SimilarityScores(0, np.array([0.1, 0.5, -0.2, 0.8, 0.3])), 0.4)
    assert list(mask.indices) == [1, 3]


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_mask_fraction_bounds(fraction):
    with pytest.raises(ValueError):
        select_ablation_set(SimilarityScores(0, np.zeros(4)), fraction)


# ---------------------------------------------------------------------------
# ablation study
# ---------------------------------------------------------------------------


def test_planted_layer_has_most_negative_protected_delta():
    model = planted_watermark_model()
    report = run_ablation_study(model, planted_watermark_data())
    assert [l.layer_id for l in report.layers] == model.conv_ids == [0, 2, 4]
    deltas = {l.layer_id: l.delta_protected for l in report.layers}
    assert min(deltas, key=deltas.get) == PLANTED_LAYER
    assert deltas[PLANTED_LAYER] == -0.5
    assert all(l.delta_target == 0.0 for l in report.layers)
    sel = select_finetune_layers(report, k=1)
    assert sel.pivot == PLANTED_LAYER and sel.ranking[0][0] == PLANTED_LAYER
    assert sel.selected == [2, 3, 4, 5, 6] + model.head_ids


def test_dead_path_layers_have_zero_deltas():
    # in the planted fixture, the filters ablated in layers 0 and 4 are read by nothing downstream
    report = run_ablation_study(planted_watermark_model(), planted_watermark_data())
    for l in report.layers:
        if l.layer_id != PLANTED_LAYER:
            assert l.delta_target == 0.0 and l.delta_protected == 0.0


def test_study_is_non_destructive_and_deterministic():
    model = planted_watermark_model()
    before = model.state()
    data = planted_watermark_data()
    a = run_ablation_study(model, data).to_csv()
    for name, arr in model.state().items():
        assert arr.tobytes() == before[name].tobytes()
    assert run_ablation_study(model, data).to_csv() == a


def test_mask_size_law_on_default_model():
    model = build_model(seed=0)
    model.adversary_fitted = True
    rng = np.random.default_rng(0)
    n = 16
    from debiaslab.synth import Dataset

    data = Dataset(rng.uniform(size=(n, 1, 28, 28)).astype(np.float32), np.arange(n) % 4, np.arange(n) % 2,
                   np.arange(n), np.full(n, "validation"), 4, 2)
    report = run_ablation_study(model, data)
    assert [(l.n_filters, l.n_ablated) for l in report.layers] == [(8, 1), (16, 2), (32, 3)]


def test_untrained_probe_and_empty_data():
    model = planted_watermark_model()
    data = planted_watermark_data()
    with pytest.raises(ValueError):
        run_ablation_study(model, data.take([]))
    model.adversary_fitted = False
    with pytest.raises(UntrainedProbeError):
        run_ablation_study(model, data)


def test_report_csv_round_trip():
    model = planted_watermark_model()
    report = run_ablation_study(model, planted_watermark_data())
    text = report.to_csv(["seed=0"])
    assert text.splitlines()[1] == ("layer_id,n_filters,n_ablated,baseline_target_auc,baseline_protected_auc,"
                                    "delta_target,delta_protected,score")
    back = AblationReport.from_csv(text, model)
    assert back.to_csv(["seed=0"]) == text
    assert select_finetune_layers(back) == select_finetune_layers(report)


# ---------------------------------------------------------------------------
# fine-tune selection
# ---------------------------------------------------------------------------


def _report(deltas, backbone_ids=range(8), head_ids=(8, 9)):
    layers = [LayerAblation(i, 10, FilterMask(i, [0]), t, p) for i, (t, p) in deltas.items()]
    return AblationReport(0.9, 0.9, layers, backbone_ids=list(backbone_ids), head_ids=list(head_ids))


def test_selection_worked_example():
    sel = select_finetune_layers(_report({1: (-0.01, -0.20), 2: (-0.15, -0.02)}, backbone_ids=[1, 2],
                                         head_ids=[3, 4]), k=1)
    assert [i for i, _ in sel.ranking] == [1, 2]
    assert sel.ranking[0][1] == pytest.approx(0.19) and sel.ranking[1][1] == pytest.approx(-0.13)
    assert sel.pivot == 1 and sel.selected == [1, 2, 3, 4]


def test_k_equal_to_layer_count_selects_whole_backbone():
    sel = select_finetune_layers(_report({0: (0, -0.1), 3: (0, -0.3), 6: (0, 0.2)}), k=3)
    assert sel.pivot == 0 and sel.selected == list(range(10))


def test_equal_scores_smaller_id_first():
    sel = select_finetune_layers(_report({6: (0.0, -0.1), 3: (0.05, -0.05), 0: (-0.2, 0.0)}))
    assert [i for i, _ in sel.ranking] == [3, 6, 0] and sel.pivot == 3


def test_selection_errors():
    r = _report({0: (0, 0), 3: (0, 0)})
    with pytest.raises(ValueError):
        select_finetune_layers(r, k=3)
    with pytest.raises(ValueError):
        select_finetune_layers(r, k=0)
    with pytest.raises(ValueError):
        select_finetune_layers(_report({}))


@settings(max_examples=100, deadline=None)
@given(scores=st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=3, max_size=3),
       k=st.integers(1, 3))
def test_downstream_closure(scores, k):
    sel = select_finetune_layers(_report(dict(zip([0, 3, 6], scores))), k=k)
    assert sel.selected == [i for i in range(8) if i >= sel.pivot] + [8, 9]
    top = [i for i, _ in sel.ranking[:k]]
    assert sel.pivot == min(top)


def test_selection_text_round_trip():
    sel = select_finetune_layers(_report({0: (0, -0.1), 3: (0, -0.3), 6: (0, 0.2)}))
    assert FinetuneSelection.from_text(sel.to_text(["k=1"])) == sel
