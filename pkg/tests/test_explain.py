import dataclasses

import numpy as np
import pytest

from aadkta.ability import AbilityTimeline, AbilityVector
from aadkta.dataset import DatasetCatalog, build_sequences
from aadkta.explain import (ExplainError, ability_snapshot, infer_path, knowledge_state_trace,
                            write_radar_csv)
from aadkta.model import ModelDims, init_params
from aadkta.training import TrainConfig, TrainedModel

from helpers import history


def hand_model(peak_concept=2, strength=30.0, uniform=False):
    """Attention-only model over 6 exercises and 3 concepts with a chosen attention peak for e5."""
    catalog = DatasetCatalog(6, 3, {0: 0, 1: 2, 2: 2, 3: 1, 4: 2, 5: 2}, {"s"})
    dims = ModelDims(d_k=4, d_h=6, m=3, K_clusters=1, N=3, n_exercises=6)
    params = init_params(dims, 0, "dkt-a")
    params.tensors["F"][:] = 0.0
    if not uniform:
        params.tensors["B"][:, 5] = [1.0, 0, 0, 0]
        params.tensors["F"][0, peak_concept] = strength
    config = TrainConfig(d_k=4, d_h=6, mode="dkt-a")
    return TrainedModel(config, catalog, params, representatives={0: 0, 1: 3, 2: 1})


class TestInferencePath:
    def test_three_node_path(self):
        h = history([(1, 2, 1), (2, 2, 1), (3, 1, 1), (4, 2, 0)])
        path = infer_path(h, 5, hand_model())
        assert path.nodes == ["e5", "k2", "e4"]
        assert path.to_json()["path"] == "e5-k2-e4"
        assert path.evidence_step == 3 and path.evidence_result == 0
        assert path.attention_weight > 0.99
        assert "e4" in path.verdict_text and "incorrectly" in path.verdict_text

    def test_most_recent_evidence(self):
        h = history([(1, 2, 0), (4, 2, 1), (3, 1, 0)])
        path = infer_path(h, 5, hand_model())
        assert path.evidence_exercise == 4 and path.evidence_step == 1 and path.evidence_result == 1
        assert "correctly" in path.verdict_text

    def test_no_direct_evidence(self):
        path = infer_path(history([(0, 0, 1), (3, 1, 0)]), 5, hand_model())
        assert path.nodes == ["e5", "k2"]
        assert "no direct evidence" in path.verdict_text

    def test_empty_history(self):
        path = infer_path(history([]), 5, hand_model())
        assert path.evidence_step is None and len(path.nodes) == 2

    def test_uniform_attention_lowest_index(self):
        path = infer_path(history([(1, 2, 1)]), 5, hand_model(uniform=True))
        assert path.concept == 0
        assert path.attention_weight == pytest.approx(1 / 3)

    def test_probability_matches_forward(self):
        model = hand_model()
        h = history([(1, 2, 1), (2, 2, 0)])
        path = infer_path(h, 5, model)
        probe = history([(1, 2, 1), (2, 2, 0), (5, 2, 0)])
        _, cache = model.forward([probe])
        assert path.probability == float(cache.Y[0, 2])

    def test_reproducible(self):
        h = history([(1, 2, 1), (3, 1, 0)])
        assert infer_path(h, 5, hand_model()) == infer_path(h, 5, hand_model())

    def test_unknown_exercise(self):
        with pytest.raises(ExplainError, match="unknown exercise"):
            infer_path(history([]), 9, hand_model())

    def test_requires_attention(self, trained_small):
        model = dataclasses.replace(hand_model())
        model.params = init_params(model.params.dims, 0, "dkt")
        with pytest.raises(ExplainError, match="no attention"):
            infer_path(history([]), 5, model)

    def test_trained_model(self, trained_small, small_data):
        model, _ = trained_small
        seq = build_sequences(small_data[1])[0]
        path = infer_path(seq, seq.steps[-1].exercise_id, model)
        assert 0 <= path.concept < model.catalog.skill_count
        if path.evidence_step is not None:
            assert seq.steps[path.evidence_step].skill_id == path.concept


class TestKnowledgeTrace:
    def test_shape_and_range(self, trained_small, small_data):
        model, _ = trained_small
        seq = build_sequences(small_data[1])[0]
        matrix = knowledge_state_trace(seq, model, [0, 1, 2, 3])
        assert matrix.cells.shape == (30, 4)
        assert np.all((matrix.cells > 0) & (matrix.cells < 1))

    def test_twenty_one_steps(self):
        rows = [(i % 6, [0, 2, 2, 1, 2, 2][i % 6], i % 2) for i in range(21)]
        assert knowledge_state_trace(history(rows), hand_model(), [0, 1, 2, 0]).cells.shape == (21, 4)

    def test_empty_history(self):
        matrix = knowledge_state_trace(history([]), hand_model())
        assert matrix.cells.shape == (1, 3)

    def test_rows_are_causal(self, trained_small, small_data):
        model, _ = trained_small
        seq = build_sequences(small_data[1])[1]
        full = knowledge_state_trace(seq, model).cells
        for t in (0, 5, 17):
            cut = dataclasses.replace(seq, steps=seq.steps[:t + 1])
            np.testing.assert_allclose(knowledge_state_trace(cut, model).cells, full[:t + 1], rtol=0, atol=1e-14)

    def test_unknown_probe(self):
        with pytest.raises(ExplainError):
            knowledge_state_trace(history([(0, 0, 1)]), hand_model(), [7])

    def test_exports(self, tmp_path):
        matrix = knowledge_state_trace(history([(0, 0, 1), (1, 2, 0)]), hand_model())
        matrix.write_csv(tmp_path / "k.csv")
        matrix.write_svg(tmp_path / "k.svg")
        assert (tmp_path / "k.csv").read_text().splitlines()[0] == "step,concept_0,concept_1,concept_2"
        assert (tmp_path / "k.svg").read_text().count("<rect") == 6


class TestAbilitySnapshot:
    def timeline(self, rows):
        per = [AbilityVector(np.array(r, float), (i, i + 1)) for i, r in enumerate(rows)]
        cum = np.minimum(np.cumsum(rows, axis=0), 5.0)
        return AbilityTimeline("s", per, [AbilityVector(c, (0, i + 1)) for i, c in enumerate(cum)])

    def test_all_incorrect(self):
        snap = ability_snapshot(self.timeline([[0, 0, 0]] * 3), 2)
        assert not snap.values.any()

    def test_before_and_after(self):
        tl = self.timeline([[0, 0.5, 0], [1.0, 0, 0], [0, 0, 2.0]])
        assert np.array_equal(ability_snapshot(tl, 0).values, [0, 0.5, 0])
        assert np.array_equal(ability_snapshot(tl, 2).values, tl.cumulative[-1].values)

    def test_out_of_range(self):
        with pytest.raises(ExplainError):
            ability_snapshot(self.timeline([[0, 0]]), 1)

    def test_radar_csv(self, tmp_path):
        tl = self.timeline([[0, 1], [2, 0]])
        write_radar_csv(tmp_path / "r.csv", [ability_snapshot(tl, 0, ["a", "b"]), ability_snapshot(tl, 1, ["a", "b"])])
        assert (tmp_path / "r.csv").read_text().splitlines() == [
            "segment,skill,ability", "0,a,0.0", "0,b,1.0", "1,a,2.0", "1,b,1.0"]
