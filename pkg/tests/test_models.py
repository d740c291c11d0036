import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidssl.data import build_dataset, render_split
from vidssl.models import (apply_mask, build_encoder, build_generator,
                           clone_as_key_encoder, generate_query, make_mask,
                           momentum_update, random_mask)
from vidssl.seeding import derive_rng


def tiny_clips(cfg, n=4):
    records = build_dataset(cfg.data)
    clips, _ = render_split(records, cfg.data, "train")
    return clips[:n].to(torch.float64)


def central_difference(fn, module, locations, step=1e-5):
    """Independent gradient oracle: (f(p+h) - f(p-h)) / 2h per location."""
    grads = []
    params = list(module.parameters())
    for pi, flat_idx in locations:
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[flat_idx].item()
            p.view(-1)[flat_idx] = orig + step
            f_plus = float(fn())
            p.view(-1)[flat_idx] = orig - step
            f_minus = float(fn())
            p.view(-1)[flat_idx] = orig
        grads.append((f_plus - f_minus) / (2.0 * step))
    return grads


def sample_locations(module, count, seed):
    rng = derive_rng(seed, "param-locations")
    params = list(module.parameters())
    locations = []
    for _ in range(count):
        pi = int(rng.integers(0, len(params)))
        flat_idx = int(rng.integers(0, params[pi].numel()))
        locations.append((pi, flat_idx))
    return locations


class TestEncoder:
    def test_identical_clips_identical_embeddings(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        assert torch.equal(enc(clips), enc(clips.clone()))

    def test_unit_norm(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        z = enc(tiny_clips(tiny_cfg))
        norms = torch.linalg.vector_norm(z, dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6)

    def test_embedding_dim(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        assert enc(tiny_clips(tiny_cfg)).shape == (4, tiny_cfg.train.embed_dim)

    def test_channel_mismatch_rejected(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        with pytest.raises(ValueError):
            enc(torch.rand(2, 4, 8, 8, 1, dtype=torch.float64))

    def test_gradient_matches_central_differences(self, tiny_cfg):
        # fixed linear functional of the embedding, 10 sampled parameters
        enc = build_encoder(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg, n=2)
        probe = torch.from_numpy(derive_rng(1, "probe-vec")
                                 .standard_normal(tiny_cfg.train.embed_dim))
        fn = lambda: (enc(clips) @ probe).sum()

        out = fn()
        out.backward()
        analytic = {id(p): p.grad.detach().clone() for p in enc.parameters()}
        locations = sample_locations(enc, 10, seed=2)
        numeric = central_difference(fn, enc, locations)
        params = list(enc.parameters())
        for (pi, flat_idx), num in zip(locations, numeric):
            ana = float(analytic[id(params[pi])].view(-1)[flat_idx])
            if max(abs(ana), abs(num)) < 1e-7:
                continue  # below the finite-difference noise floor
            assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-8), \
                f"param {pi}[{flat_idx}]: analytic {ana} vs numeric {num}"


class TestMomentumUpdate:
    def _pair(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        key = clone_as_key_encoder(enc)
        with torch.no_grad():
            for p in enc.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        return key, enc

    def test_m_zero_copies_query(self, tiny_cfg):
        key, query = self._pair(tiny_cfg)
        momentum_update(key, query, 0.0)
        for kp, qp in zip(key.parameters(), query.parameters()):
            assert torch.equal(kp, qp)

    def test_equal_params_fixed_point(self, tiny_cfg):
        enc = build_encoder(tiny_cfg.train)
        key = clone_as_key_encoder(enc)
        before = [p.detach().clone() for p in key.parameters()]
        momentum_update(key, enc, 0.9)
        for prev, kp in zip(before, key.parameters()):
            assert torch.equal(prev, kp)

    def test_scalar_interpolation(self):
        key, query = torch.nn.Linear(1, 1), torch.nn.Linear(1, 1)
        with torch.no_grad():
            for p in key.parameters():
                p.fill_(0.0)
            for p in query.parameters():
                p.fill_(1.0)
        momentum_update(key, query, 0.9)
        for p in key.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.1))

    def test_exact_linear_interpolation_float64(self, tiny_cfg):
        key, query = self._pair(tiny_cfg)
        k_before = [p.detach().clone() for p in key.parameters()]
        m = 0.73
        momentum_update(key, query, m)
        for kb, kp, qp in zip(k_before, key.parameters(), query.parameters()):
            assert torch.equal(kp, m * kb + (1.0 - m) * qp)

    def test_drift_norm_identity(self, tiny_cfg):
        # || k' - k || == (1 - m) * || q - k || exactly in exact arithmetic
        key, query = self._pair(tiny_cfg)
        m = 0.9
        k_before = torch.cat([p.detach().reshape(-1) for p in key.parameters()])
        q_flat = torch.cat([p.detach().reshape(-1) for p in query.parameters()])
        momentum_update(key, query, m)
        k_after = torch.cat([p.detach().reshape(-1) for p in key.parameters()])
        lhs = float(torch.linalg.vector_norm(k_after - k_before))
        rhs = (1.0 - m) * float(torch.linalg.vector_norm(q_flat - k_before))
        assert abs(lhs - rhs) <= 1e-12 * max(rhs, 1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            momentum_update(torch.nn.Linear(2, 2), torch.nn.Linear(3, 2), 0.5)

    def test_invalid_coefficient(self):
        a, b = torch.nn.Linear(1, 1), torch.nn.Linear(1, 1)
        with pytest.raises(ValueError):
            momentum_update(a, b, 1.5)


class TestFrameScorer:
    def test_score_per_frame(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        scores = gen(clips)
        assert scores.shape == (4, tiny_cfg.data.clip_frames)
        assert bool(torch.isfinite(scores).all())

    def test_deterministic(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        assert torch.equal(gen(clips), gen(clips.clone()))

    def test_single_clip_shape(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        scores = gen(tiny_clips(tiny_cfg)[0])
        assert scores.shape == (tiny_cfg.data.clip_frames,)

    def test_gradient_matches_central_differences(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg, n=2)
        fn = lambda: gen(clips).sum()
        fn().backward()
        analytic = {id(p): p.grad.detach().clone() for p in gen.parameters()}
        locations = sample_locations(gen, 10, seed=3)
        numeric = central_difference(fn, gen, locations)
        params = list(gen.parameters())
        for (pi, flat_idx), num in zip(locations, numeric):
            ana = float(analytic[id(params[pi])].view(-1)[flat_idx])
            if max(abs(ana), abs(num)) < 1e-7:
                continue  # below the finite-difference noise floor
            assert abs(ana - num) <= 1e-4 * max(abs(num), 1e-8)


class TestMakeMask:
    def test_drops_k_largest(self):
        mask = make_mask(torch.tensor([0.9, 0.1, 0.8, 0.2]), 2)
        assert mask.tolist() == [0.0, 1.0, 0.0, 1.0]

    def test_k_zero_keeps_all(self):
        mask = make_mask(torch.tensor([0.9, 0.1, 0.8, 0.2]), 0)
        assert mask.tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_ties_drop_lower_index_first(self):
        mask = make_mask(torch.zeros(4), 2)
        assert mask.tolist() == [0.0, 0.0, 1.0, 1.0]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            make_mask(torch.zeros(4), 4)
        with pytest.raises(ValueError):
            make_mask(torch.zeros(4), -1)

    def test_batched(self):
        scores = torch.tensor([[0.9, 0.1, 0.8, 0.2], [0.0, 1.0, 2.0, 3.0]])
        mask = make_mask(scores, 2)
        assert mask.tolist() == [[0.0, 1.0, 0.0, 1.0], [1.0, 1.0, 0.0, 0.0]]

    @given(perm=st.permutations(range(8)), k=st.integers(0, 7),
           scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_strictly_increasing_transform(self, perm, k, scale, shift):
        scores = torch.tensor(perm, dtype=torch.float64)
        base = make_mask(scores, k)
        assert int((base == 0).sum()) == k
        transformed = make_mask(scores * scale + shift, k)
        assert torch.equal(base, transformed)
        assert torch.equal(base, make_mask(torch.tanh(scores / 8.0), k))


class TestApplyMask:
    def test_all_keep_is_identity(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        mask = torch.ones(4, tiny_cfg.data.clip_frames)
        assert torch.equal(apply_mask(clips, mask), clips)

    def test_drop_one_frame(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        mask = torch.ones(tiny_cfg.data.clip_frames)
        mask[1] = 0.0
        out = apply_mask(clips[0], mask)
        assert torch.all(out[1] == 0.0)
        for t in (0, 2, 3):
            assert torch.equal(out[t], clips[0][t])

    def test_mean_scales_with_kept_fraction(self):
        # frames with equal means: mean(out) == mean(in) * (T - k) / T
        t, k = 8, 3
        clip = torch.full((t, 6, 6, 3), 0.25, dtype=torch.float64)
        mask = make_mask(torch.arange(t, dtype=torch.float64), k)
        out = apply_mask(clip, mask)
        expected = 0.25 * (t - k) / t
        assert abs(float(out.mean()) - expected) < 1e-12

    def test_idempotent_for_fixed_mask(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        mask = make_mask(torch.rand(4, tiny_cfg.data.clip_frames), 2)
        once = apply_mask(clips, mask)
        assert torch.equal(apply_mask(once, mask), once)

    def test_length_mismatch(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        with pytest.raises(ValueError):
            apply_mask(clips, torch.ones(4, tiny_cfg.data.clip_frames + 1))


class TestGenerateQuery:
    def test_mode_none_is_identity(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        query, mask = generate_query(None, clips, 2, "none")
        assert torch.equal(query, clips)
        assert torch.all(mask == 1.0)

    def test_mode_random_reproducible(self, tiny_cfg):
        clips = tiny_clips(tiny_cfg)
        q1, m1 = generate_query(None, clips, 2, "random", rng=derive_rng(9, "m"))
        q2, m2 = generate_query(None, clips, 2, "random", rng=derive_rng(9, "m"))
        assert torch.equal(m1, m2) and torch.equal(q1, q2)
        assert torch.all((m1 == 0).sum(dim=1) == 2)

    def test_mode_adversarial_composes_score_mask_apply(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        query, mask = generate_query(gen, clips, 2, "adversarial")
        with torch.no_grad():
            expected_mask = make_mask(gen(clips), 2)
        assert torch.equal(mask, expected_mask)
        assert torch.equal(query, apply_mask(clips, expected_mask))

    def test_straight_through_reaches_generator(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        query, _ = generate_query(gen, clips, 2, "adversarial", straight_through=True)
        query.sum().backward()
        grads = [p.grad for p in gen.parameters() if p.grad is not None]
        assert grads and any(float(g.abs().sum()) > 0 for g in grads)

    def test_straight_through_forward_equals_hard(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        soft_q, mask = generate_query(gen, clips, 2, "adversarial",
                                      straight_through=True)
        assert torch.equal(soft_q.detach(), apply_mask(clips, mask))

    def test_exactly_k_zeros_every_mode(self, tiny_cfg):
        gen = build_generator(tiny_cfg.train)
        clips = tiny_clips(tiny_cfg)
        for mode in ("random", "adversarial"):
            _, mask = generate_query(gen, clips, 3, mode, rng=derive_rng(1, "x"))
            assert torch.all((mask == 0).sum(dim=1) == 3)

    def test_unknown_mode(self, tiny_cfg):
        with pytest.raises(ValueError):
            generate_query(None, tiny_clips(tiny_cfg), 1, "sometimes")


class TestRandomMask:
    def test_exact_k_zeros(self):
        mask = random_mask(16, 10, 4, derive_rng(0, "r"))
        assert torch.all((mask == 0).sum(dim=1) == 4)

    def test_uniformity_over_positions(self):
        # every frame index should get dropped roughly equally often
        mask = random_mask(4000, 8, 2, derive_rng(0, "u"))
        freq = (mask == 0).to(torch.float64).mean(dim=0)
        assert torch.allclose(freq, torch.full_like(freq, 0.25), atol=0.03)
