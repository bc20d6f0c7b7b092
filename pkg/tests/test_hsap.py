"""Hierarchical sampling, dynamic margins, triplet loss vs brute force, and
the pretraining loop."""

import math

import numpy as np
import pytest

import medcoder.autodiff as ad
from medcoder.autodiff import Tape
from medcoder.data import synthetic_ontology
from medcoder.encoder import EncoderConfig, init_params
from medcoder.errors import InputError, NumericsError, SamplingError
from medcoder.hsap import (
    SamplerConfig,
    Triplet,
    TripletBatch,
    build_triplets,
    dynamic_margin,
    encode_terms,
    mean_relation_distances,
    pretrain,
    sample_minibatch,
    triplet_loss,
)
from medcoder.ontology import build_hierarchy
from medcoder.vocab import Vocabulary

from oracles import finite_difference_grads, max_relative_error, triplet_loss_bruteforce


def unit(theta):
    return np.array([math.cos(theta), math.sin(theta)])


@pytest.fixture
def toy_graph():
    g = build_hierarchy(["250", "250.0", "250.1", "250.2", "428", "428.0"])
    for i, code in enumerate(sorted(g.entities)):
        g.entities[code].synonyms.update({f"term{i}a", f"term{i}b", f"term{i}c"})
        g.entities[code].abbreviations.add(f"T{i}")
    return g


class TestSampler:
    def test_batch_term_count(self, toy_graph):
        cfg = SamplerConfig(anchors_per_batch=2, group_size=3, terms_per_entity=4)
        assert cfg.batch_terms == 24
        batch = sample_minibatch(toy_graph, cfg, level=1, rng=np.random.default_rng(0))
        assert len(batch) == 24

    def test_degenerate_single_term(self, toy_graph):
        cfg = SamplerConfig(anchors_per_batch=1, group_size=1, terms_per_entity=1)
        batch = sample_minibatch(toy_graph, cfg, level=0, rng=np.random.default_rng(1))
        assert len(batch) == 1

    def test_fixed_seed_reproduces_batch(self, toy_graph):
        cfg = SamplerConfig(2, 3, 2)
        a = sample_minibatch(toy_graph, cfg, 1, np.random.default_rng(7))
        b = sample_minibatch(toy_graph, cfg, 1, np.random.default_rng(7))
        assert a == b

    def test_level_without_enough_anchors(self, toy_graph):
        cfg = SamplerConfig(anchors_per_batch=50, group_size=1, terms_per_entity=1)
        with pytest.raises(SamplingError):
            sample_minibatch(toy_graph, cfg, 0, np.random.default_rng(0))

    def test_isolated_anchor_backfills_with_warning(self, caplog):
        g = build_hierarchy(["100", "200", "300"])
        for code in g.entities:
            g.entities[code].synonyms.add(f"s{code}")
        cfg = SamplerConfig(anchors_per_batch=1, group_size=3, terms_per_entity=1)
        with caplog.at_level("WARNING"):
            batch = sample_minibatch(g, cfg, 0, np.random.default_rng(2))
        assert len(batch) == 3
        assert any("unrelated" in rec.message for rec in caplog.records)

    def test_terms_sampled_without_replacement_when_enough(self, toy_graph):
        cfg = SamplerConfig(1, 1, 4)  # each entity holds exactly 4 terms
        batch = sample_minibatch(toy_graph, cfg, 1, np.random.default_rng(3))
        terms = [t for _, t in batch]
        assert len(set(terms)) == 4


class TestDynamicMargin:
    def test_parent_margin(self):
        assert dynamic_margin(unit(0), unit(1), "parent") == pytest.approx(math.pi / 2)

    def test_orthogonal_sibling_margin(self):
        m = dynamic_margin(unit(0), unit(math.pi / 2), "sibling")
        assert m == pytest.approx(math.pi, abs=1e-12)

    def test_inter_margin(self):
        assert dynamic_margin(unit(0), unit(2), "inter") == pytest.approx(math.pi)

    def test_range_and_sibling_monotonicity(self):
        rng = np.random.default_rng(4)
        last = None
        for cos in np.linspace(0.0, 0.999, 20):
            m = dynamic_margin(np.array([1.0, 0.0]), np.array([cos, math.sqrt(1 - cos**2)]), "sibling")
            assert math.pi / 2 <= m <= math.pi
            if last is not None:
                assert m < last  # decreasing in |cosine|
            last = m
        for _ in range(50):
            v = rng.normal(size=3)
            w = rng.normal(size=3)
            v /= np.linalg.norm(v)
            w /= np.linalg.norm(w)
            for rel in ("parent", "sibling", "inter"):
                assert math.pi / 2 - 1e-12 <= dynamic_margin(v, w, rel) <= math.pi + 1e-12

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericsError):
            dynamic_margin(np.zeros(3), unit(1), "sibling")

    def test_unknown_relation(self):
        with pytest.raises(InputError):
            dynamic_margin(unit(0), unit(1), "cousin")


class TestTripletLoss:
    def test_inactive_hinge(self):
        emb = ad.tensor(np.stack([unit(0.0), unit(0.3), unit(2.0)]))
        batch = TripletBatch([Triplet(0, 1, 2, "parent", math.pi / 2)])
        assert triplet_loss(emb, batch).item() == pytest.approx(0.0, abs=1e-12)

    def test_active_hinge_value(self):
        emb = ad.tensor(np.stack([unit(0.0), unit(0.5), unit(1.0)]))
        batch = TripletBatch([Triplet(0, 1, 2, "inter", math.pi)])
        want = (math.pi - 1.0 + 0.5) / 2.0
        assert triplet_loss(emb, batch).item() == pytest.approx(want, abs=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(InputError):
            triplet_loss(ad.tensor(np.eye(2)), TripletBatch([]))

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bruteforce_enumeration(self, toy_graph, seed):
        rng = np.random.default_rng(seed)
        entities = ["250.0", "250.0", "250.1", "250.1", "250", "428", "428.0", "250.2"]
        emb = rng.normal(size=(len(entities), 6))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        batch = build_triplets(emb, entities, toy_graph)
        assert batch.count <= 30 * 30
        got = triplet_loss(ad.tensor(emb), batch).item()
        parent_of = {c: toy_graph.entities[c].parent for c in toy_graph.entities}
        want = triplet_loss_bruteforce(emb, entities, parent_of)
        assert got == pytest.approx(want, abs=1e-10)

    def test_nonnegative_and_zero_iff_satisfied(self, toy_graph):
        rng = np.random.default_rng(9)
        entities = ["250.0", "250.0", "428"]
        emb = rng.normal(size=(3, 4))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        batch = build_triplets(emb, entities, toy_graph)
        loss = triplet_loss(ad.tensor(emb), batch).item()
        assert loss >= 0.0
        satisfied = all(
            math.acos(np.clip(emb[t.anchor] @ emb[t.negative], -1, 1)) - t.margin
            >= math.acos(np.clip(emb[t.anchor] @ emb[t.positive], -1, 1))
            for t in batch.triplets
        )
        assert (loss == 0.0) == satisfied

    def test_chord_distance_variant(self):
        emb = ad.tensor(np.stack([unit(0.0), unit(0.5), unit(2.0)]))
        batch = TripletBatch([Triplet(0, 1, 2, "inter", math.pi)])
        d_an = math.sqrt(2 - 2 * math.cos(2.0))
        d_ap = math.sqrt(2 - 2 * math.cos(0.5))
        want = max(0.0, math.pi - d_an + d_ap) / 2.0
        assert triplet_loss(emb, batch, distance="chord").item() == pytest.approx(want, abs=1e-9)

    def test_gradient_away_from_hinge(self, toy_graph):
        rng = np.random.default_rng(11)
        entities = ["250.0", "250.0", "250.1", "428"]
        raw = ad.parameter(rng.normal(size=(4, 5)))
        start = raw.values / np.linalg.norm(raw.values, axis=1, keepdims=True)
        batch = build_triplets(start, entities, toy_graph)
        hinge_gaps = [
            abs(t.margin
                - math.acos(np.clip(start[t.anchor] @ start[t.negative], -1, 1))
                + math.acos(np.clip(start[t.anchor] @ start[t.positive], -1, 1)))
            for t in batch.triplets
        ]
        assert min(hinge_gaps) > 1e-3  # away from the kink

        def build():
            return triplet_loss(ad.normalize_rows(raw), batch)

        with Tape() as tape:
            loss = build()
            tape.backward(loss)
        numeric = finite_difference_grads(lambda: build().item(), {"e": raw.values})
        err = max_relative_error(raw.grad, numeric["e"])
        assert err < 1e-4, f"rel err {err:.3g}"


class TestPretrain:
    def setup_method(self):
        self.graph = synthetic_ontology(n_roots=2, branching=(2,), terms_per_entity=3)
        terms = [t for c in self.graph.entities for t in self.graph.entity(c).terms]
        self.vocab = Vocabulary.from_corpus([" ".join(terms).split()])
        self.config = EncoderConfig(vocab_size=len(self.vocab), hidden_dim=8, num_layers=1,
                                    num_heads=2, local_window=4, max_positions=64)
        self.sampler = SamplerConfig(anchors_per_batch=2, group_size=2, terms_per_entity=2)

    def test_holdout_loss_decreases(self):
        params = init_params(self.config, np.random.default_rng(0))
        result = pretrain(self.graph, params, self.config, self.vocab, self.sampler,
                          steps=40, rng=np.random.default_rng(1), lr=3e-3)
        assert len(result.history) == 40
        assert result.holdout_loss_end < result.holdout_loss_start

    def test_zero_steps_leaves_parameters_untouched(self):
        params = init_params(self.config, np.random.default_rng(0))
        before = {n: p.values.tobytes() for n, p in params.items()}
        pretrain(self.graph, params, self.config, self.vocab, self.sampler,
                 steps=0, rng=np.random.default_rng(1))
        after = {n: p.values.tobytes() for n, p in params.items()}
        assert before == after

    def test_same_seed_same_checkpoint(self):
        outs = []
        for _ in range(2):
            params = init_params(self.config, np.random.default_rng(0))
            pretrain(self.graph, params, self.config, self.vocab, self.sampler,
                     steps=10, rng=np.random.default_rng(5))
            outs.append({n: p.values.tobytes() for n, p in params.items()})
        assert outs[0] == outs[1]

    def test_log_file(self, tmp_path):
        params = init_params(self.config, np.random.default_rng(0))
        log = tmp_path / "pretrain.log"
        pretrain(self.graph, params, self.config, self.vocab, self.sampler,
                 steps=5, rng=np.random.default_rng(1), log_path=log)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 5
        step, loss, level = lines[0].split("\t")
        assert step == "0" and float(loss) >= 0


class TestRelationDistances:
    def test_buckets(self, toy_graph):
        entities = ["250.0", "250.0", "250.1", "428"]
        emb = np.stack([unit(0.0), unit(0.0), unit(1.0), unit(2.5)])
        means = mean_relation_distances(emb, entities, toy_graph)
        assert means["intra"] == pytest.approx(0.0, abs=1e-9)
        assert means["sibling"] == pytest.approx(1.0, abs=1e-6)
        assert means["inter"] == pytest.approx((2.5 + 2.5 + 1.5) / 3, abs=1e-6)
