"""Loss math against independent scalar oracles, degeneration identities,
symmetry properties, and gradient checks."""

import math

import numpy as np
import pytest

import biview.autograd as ag
from biview.autograd import Tensor, grad_check
from biview.contrastive import (ContrastiveConfig, ViewLatents, adaptive_loss, batch_loss,
                                cosine_similarity, cross_view_losses, info_nce, pair_loss,
                                single_view_losses)
from biview.errors import ConfigError, DataError, NumericalError

from loss_oracle import oracle_adaptive, oracle_batch, oracle_info_nce


def unit(rng, d=8):
    v = rng.normal(size=d).astype(np.float32)
    return v / np.linalg.norm(v)


def random_latents(rng, a=1, b=1, d=8):
    return ViewLatents(
        y_f1=Tensor(unit(rng, d)) if a else None,
        y_f2=unit(rng, d) if a else None,
        y_g1=Tensor(unit(rng, d)) if b else None,
        y_g2=unit(rng, d) if b else None,
    )


class TestCosineSimilarity:
    def test_self_and_negated(self):
        v = unit(np.random.default_rng(0))
        assert cosine_similarity(Tensor(v), Tensor(v)).item() == pytest.approx(1.0, abs=1e-6)
        assert cosine_similarity(Tensor(v), Tensor(-v)).item() == pytest.approx(-1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        u, v = rng.normal(size=4).astype(np.float32), rng.normal(size=4).astype(np.float32)
        s1 = cosine_similarity(Tensor(u), Tensor(v)).item()
        s2 = cosine_similarity(Tensor(u * 7.5), Tensor(v * 0.2)).item()
        assert s1 == pytest.approx(s2, abs=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(NumericalError):
            cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


class TestInfoNce:
    def test_zero_negatives_is_exactly_zero(self):
        rng = np.random.default_rng(2)
        q = unit(rng)
        assert info_nce(Tensor(q), unit(rng), [], 0.1).item() == 0.0

    def test_perfect_positive_orthogonal_negative(self):
        e1 = np.eye(8, dtype=np.float32)[0]
        e2 = np.eye(8, dtype=np.float32)[1]
        loss = info_nce(Tensor(e1), e1, [e2], 0.1).item()
        assert loss == pytest.approx(math.log(1 + math.exp(-10)), rel=1e-2, abs=1e-6)

    def test_symmetric_two_way(self):
        e = np.eye(8, dtype=np.float32)
        # sim(q,k)=0 and one negative with sim 0 -> ln 2, independent of tau
        for tau in (0.07, 0.1, 1.0):
            loss = info_nce(Tensor(e[0]), e[1], [e[2]], tau).item()
            assert loss == pytest.approx(math.log(2), rel=1e-6)

    @pytest.mark.parametrize("n_neg", [1, 5, 64])
    def test_matches_float64_oracle(self, n_neg):
        rng = np.random.default_rng(
            n_neg)
        for _ in range(20):
            q, k = unit(rng), unit(rng)
            negs = np.stack([unit(rng) for _ in range(n_neg)])
            mine = info_nce(Tensor(q), k, negs, 0.1).item()
            want = oracle_info_nce(q, k, negs, 0.1)
            assert abs(mine - want) <= 1e-5 * max(1.0, abs(want))

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            rows = [unit(rng) for _ in range(rng.integers(0, 6))]
            negs = np.stack(rows) if rows else np.zeros((0, 8), np.float32)
            loss = info_nce(Tensor(unit(rng)), unit(rng), negs, 0.1).item()
            assert loss >= 0.0

    def test_monotone_in_similarities(self):
        # raising the positive similarity lowers the loss; raising a negative
        # similarity raises it
        rng = np.random.default_rng(4)
        q = unit(rng)
        negs = np.stack([unit(rng) for _ in range(4)])
        base_k = unit(rng)
        better_k = q * 0.9 + base_k * 0.1
        l_base = info_nce(Tensor(q), base_k, negs, 0.1).item()
        l_better = info_nce(Tensor(q), better_k, negs, 0.1).item()
        assert l_better < l_base
        harder = negs.copy()
        harder[0] = (q * 0.9 + harder[0] * 0.1) / np.linalg.norm(q * 0.9 + harder[0] * 0.1)
        assert info_nce(Tensor(q), base_k, harder, 0.1).item() > l_base

    def test_gradient_flows_only_through_query(self):
        rng = np.random.default_rng(5)
        q = Tensor(unit(rng), requires_grad=True)
        k = Tensor(unit(rng), requires_grad=True)  # passed as constant key
        negs = np.stack([unit(rng) for _ in range(3)])
        info_nce(q, k, negs, 0.1).backward()
        assert q.grad is not None
        assert k.grad is None

    def test_grad_check_8dim(self):
        rng = np.random.default_rng(6)
        k = unit(rng)
        negs = np.stack([unit(rng) for _ in range(5)])
        def f(t):
            return info_nce(t, k, negs, 0.1)
        assert grad_check(f, Tensor(unit(rng)), eps=1e-2) < 1e-3

    def test_invalid_tau(self):
        with pytest.raises(ConfigError):
            info_nce(Tensor([1.0, 0.0]), np.array([1.0, 0.0], np.float32), [], 0.0)


class TestPresenceLogic:
    def test_single_view_losses_absent_side(self):
        rng = np.random.default_rng(7)
        lat = random_latents(rng, a=0, b=1)
        l_ff, l_gg = single_view_losses(lat, [], 0.1)
        assert l_ff is None and l_gg is not None

    def test_identical_query_and_key_no_negatives(self):
        rng = np.random.default_rng(8)
        v = unit(rng)
        lat = ViewLatents(y_f1=Tensor(v), y_f2=v.copy(), y_g1=Tensor(v), y_g2=v.copy())
        l_ff, l_gg = single_view_losses(lat, [], 0.1)
        assert l_ff.item() == 0.0 and l_gg.item() == 0.0

    def test_cross_absent_when_unpaired(self):
        rng = np.random.default_rng(9)
        assert cross_view_losses(random_latents(rng, a=1, b=0), [], 0.1) == (None, None)

    def test_viewlatents_presence_validation(self):
        rng = np.random.default_rng(10)
        with pytest.raises(DataError):
            ViewLatents(y_f1=Tensor(unit(rng)), y_f2=None)

    def test_viewlatents_norm_validation(self):
        rng = np.random.default_rng(11)
        with pytest.raises(NumericalError):
            ViewLatents(y_f1=Tensor(unit(rng) * 1.01), y_f2=unit(rng))

    def test_pair_loss_rejects_missing_view(self):
        rng = np.random.default_rng(12)
        with pytest.raises(DataError):
            pair_loss(random_latents(rng, a=1, b=0), [], 0.1)

    def test_adaptive_rejects_empty_patient(self):
        with pytest.raises(DataError):
            adaptive_loss(ViewLatents(), [], ContrastiveConfig())


class TestDegenerationSuite:
    """Eq-level identities hold to float equality (same expression tree)."""

    def setup_method(self):
        rng = np.random.default_rng(13)
        self.rng = rng
        self.negs = np.stack([unit(rng) for _ in range(8)])

    def test_missing_f_equals_lgg_bitwise(self):
        lat = random_latents(self.rng, a=0, b=1)
        loss = adaptive_loss(lat, self.negs, ContrastiveConfig(tau=0.1, lam=0.5))
        _, l_gg = single_view_losses(lat, self.negs, 0.1)
        assert loss.item() == l_gg.item()

    def test_missing_g_equals_lff_bitwise(self):
        lat = random_latents(self.rng, a=1, b=0)
        loss = adaptive_loss(lat, self.negs, ContrastiveConfig(tau=0.1, lam=0.5))
        l_ff, _ = single_view_losses(lat, self.negs, 0.1)
        assert loss.item() == l_ff.item()

    def test_lambda_zero_is_sum_of_single_views_bitwise(self):
        lat = random_latents(self.rng)
        loss = adaptive_loss(lat, self.negs, ContrastiveConfig(tau=0.1, lam=0.0))
        l_ff, l_gg = single_view_losses(lat, self.negs, 0.1)
        assert loss.item() == ag.add(l_ff, l_gg).item()

    def test_lambda_one_equals_pair_loss_bitwise(self):
        for _ in range(10):
            lat = random_latents(self.rng)
            a = adaptive_loss(lat, self.negs, ContrastiveConfig(tau=0.1, lam=1.0)).item()
            p = pair_loss(lat, self.negs, 0.1).item()
            assert a == p

    def test_swap_symmetry_bitwise(self):
        # exchanging f<->g sides together with a<->b leaves the loss unchanged
        for _ in range(10):
            lat = random_latents(self.rng)
            swapped = ViewLatents(y_f1=lat.y_g1, y_f2=lat.y_g2, y_g1=lat.y_f1, y_g2=lat.y_f2)
            cfg = ContrastiveConfig(tau=0.1, lam=0.5)
            assert adaptive_loss(lat, self.negs, cfg).item() == adaptive_loss(swapped, self.negs, cfg).item()

    def test_unpaired_swap_symmetry(self):
        lat = random_latents(self.rng, a=1, b=0)
        swapped = ViewLatents(y_f1=None, y_f2=None, y_g1=lat.y_f1, y_g2=lat.y_f2)
        cfg = ContrastiveConfig()
        assert adaptive_loss(lat, self.negs, cfg).item() == adaptive_loss(swapped, self.negs, cfg).item()


class TestOracleAgreement:
    def test_adaptive_matches_per_term_oracle(self):
        rng = np.random.default_rng(14)
        negs = np.stack([unit(rng) for _ in range(8)])
        for _ in range(50):
            lat = random_latents(rng)
            mine = adaptive_loss(lat, negs, ContrastiveConfig(tau=0.1, lam=0.5)).item()
            want = oracle_adaptive(lat.y_f1.data, lat.y_f2, lat.y_g1.data, lat.y_g2,
                                   negs, 0.1, 0.5)
            assert abs(mine - want) <= 1e-5 * max(1.0, abs(want))

    def test_batch_loss_mixed_batches(self):
        rng = np.random.default_rng(15)
        cfg = ContrastiveConfig(tau=0.1, lam=0.5)
        for _ in range(25):
            negs = np.stack([unit(rng) for _ in range(int(rng.integers(1, 12)))])
            pats, tuples = [], []
            for _ in range(int(rng.integers(1, 6))):
                a, b = {0: (1, 1), 1: (1, 0), 2: (0, 1)}[int(rng.integers(0, 3))]
                lat = random_latents(rng, a=a, b=b)
                pats.append(lat)
                tuples.append((None if not a else lat.y_f1.data, None if not a else lat.y_f2,
                               None if not b else lat.y_g1.data, None if not b else lat.y_g2))
            mine = batch_loss(pats, negs, cfg).item()
            want = oracle_batch(tuples, negs, 0.1, 0.5)
            assert abs(mine - want) <= 1e-5 * max(1.0, abs(want))

    def test_batch_loss_two_patient_mean(self):
        rng = np.random.default_rng(16)
        negs = np.stack([unit(rng) for _ in range(4)])
        p1, p2 = random_latents(rng), random_latents(rng)
        cfg = ContrastiveConfig()
        l1 = adaptive_loss(p1, negs, cfg).item()
        l2 = adaptive_loss(p2, negs, cfg).item()
        assert batch_loss([p1, p2], negs, cfg).item() == pytest.approx((l1 + l2) / 2, rel=1e-6)

    def test_batch_loss_single_patient_identity(self):
        rng = np.random.default_rng(17)
        negs = np.stack([unit(rng) for _ in range(4)])
        p = random_latents(rng)
        cfg = ContrastiveConfig()
        assert batch_loss([p], negs, cfg).item() == adaptive_loss(p, negs, cfg).item()

    def test_batch_error_names_patient(self):
        rng = np.random.default_rng(18)
        with pytest.raises(DataError) as exc:
            batch_loss([random_latents(rng), ViewLatents()], [], ContrastiveConfig())
        assert "patient 1" in str(exc.value)

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            batch_loss([], [], ContrastiveConfig())


class TestLossGradients:
    def test_batch_loss_grad_wrt_each_query_latent(self):
        rng = np.random.default_rng(19)
        negs = np.stack([unit(rng) for _ in range(8)])
        cfg = ContrastiveConfig(tau=0.1, lam=0.5)
        f2, g1, g2 = unit(rng), unit(rng), unit(rng)
        u_g1, u_g2 = unit(rng), unit(rng)

        def f_wrt_f1(t):
            paired = ViewLatents(y_f1=t, y_f2=f2, y_g1=Tensor(g1), y_g2=g2, check=False)
            single = ViewLatents(y_g1=Tensor(u_g1), y_g2=u_g2, check=False)
            return batch_loss([paired, single], negs, cfg)

        def f_wrt_g1(t):
            paired = ViewLatents(y_f1=Tensor(unit(np.random.default_rng(99))), y_f2=f2,
                                 y_g1=t, y_g2=g2, check=False)
            return batch_loss([paired], negs, cfg)

        assert grad_check(f_wrt_f1, Tensor(unit(rng)), eps=1e-2) < 1e-3
        assert grad_check(f_wrt_g1, Tensor(unit(rng)), eps=1e-2) < 1e-3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ContrastiveConfig(tau=0.0)
        with pytest.raises(ConfigError):
            ContrastiveConfig(lam=-0.1)
