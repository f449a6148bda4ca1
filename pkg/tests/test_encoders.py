"""Encoder tests: InfoNCE against a brute-force numpy oracle, finite-difference
gradients, and the encoding interface contracts."""
import time

import numpy as np
import pytest
import torch

from facespeak.codec import CodeGrid
from facespeak.encoders import (
    EMBED_DIM,
    EncoderBundle,
    VoiceEmbedding,
    _tile_crop,
    info_nce,
    load_encoders,
    retrieval_eval,
    save_encoders,
)
from facespeak.errors import InputError


def infonce_oracle(zf: np.ndarray, za: np.ndarray, tau: float) -> float:
    """Independent brute-force implementation used as the oracle."""
    zf = zf / np.linalg.norm(zf, axis=1, keepdims=True)
    za = za / np.linalg.norm(za, axis=1, keepdims=True)
    sims = zf @ za.T / tau
    total = 0.0
    for i in range(len(zf)):
        row = sims[i]
        m = row.max()
        log_softmax = row - m - np.log(np.sum(np.exp(row - m)))
        total -= log_softmax[i]
    return total / len(zf)


class TestInfoNCEOracle:
    def test_matches_oracle_on_100_random_batches(self):
        rng = np.random.default_rng(0)
        start = time.time()
        for _ in range(100):
            n = int(rng.integers(1, 17))
            d = int(rng.integers(2, 33))
            tau = float(rng.uniform(0.03, 2.0))
            zf = rng.standard_normal((n, d))
            za = rng.standard_normal((n, d))
            got = float(info_nce(torch.tensor(zf), torch.tensor(za), tau))
            want = infonce_oracle(zf, za, tau)
            assert abs(got - want) < 1e-6
        assert time.time() - start < 60.0

    def test_single_pair_is_zero(self):
        z = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        assert float(info_nce(z, z, 0.07)) == pytest.approx(0.0, abs=1e-9)

    def test_identical_embeddings_n4_is_ln4(self):
        z = torch.ones((4, 8), dtype=torch.float64)
        assert float(info_nce(z, z, 0.07)) == pytest.approx(np.log(4.0), abs=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            n, d = 5, 7
            zf = torch.tensor(rng.standard_normal((n, d)), requires_grad=True)
            za = torch.tensor(rng.standard_normal((n, d)), requires_grad=True)
            log_tau = torch.tensor(np.log(0.2), requires_grad=True)
            loss = info_nce(zf, za, log_tau.exp())
            loss.backward()
            eps = 1e-4

            def f(zf_v, za_v, lt_v):
                return infonce_oracle(zf_v, za_v, float(np.exp(lt_v)))

            zf_v = zf.detach().numpy()
            za_v = za.detach().numpy()
            lt_v = float(log_tau.detach())
            for mat, grad in ((zf_v, zf.grad.numpy()), (za_v, za.grad.numpy())):
                idx = (int(rng.integers(n)), int(rng.integers(d)))
                up = mat.copy(); up[idx] += eps
                dn = mat.copy(); dn[idx] -= eps
                if mat is zf_v:
                    fd = (f(up, za_v, lt_v) - f(dn, za_v, lt_v)) / (2 * eps)
                else:
                    fd = (f(zf_v, up, lt_v) - f(zf_v, dn, lt_v)) / (2 * eps)
                assert abs(grad[idx] - fd) <= 1e-3 * max(abs(fd), 1e-6)
            fd_tau = (f(zf_v, za_v, lt_v + eps) - f(zf_v, za_v, lt_v - eps)) / (2 * eps)
            got_tau = float(log_tau.grad)
            assert abs(got_tau - fd_tau) <= 1e-3 * max(abs(fd_tau), 1e-6)

    def test_row_rescaling_invariance(self):
        rng = np.random.default_rng(2)
        zf = torch.tensor(rng.standard_normal((6, 5)))
        za = torch.tensor(rng.standard_normal((6, 5)))
        base = float(info_nce(zf, za, 0.1))
        zf2 = zf.clone()
        zf2[3] *= 17.5
        assert abs(float(info_nce(zf2, za, 0.1)) - base) < 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        zf = torch.tensor(rng.standard_normal((6, 5)))
        za = torch.tensor(rng.standard_normal((6, 5)))
        base = float(info_nce(zf, za, 0.1))
        perm = [1, 0, 2, 3, 4, 5]
        assert float(info_nce(zf[perm], za[perm], 0.1)) == pytest.approx(base, abs=1e-9)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            zf = torch.tensor(rng.standard_normal((4, 6)))
            za = torch.tensor(rng.standard_normal((4, 6)))
            assert float(info_nce(zf, za, 0.5)) >= 0.0

    def test_errors(self):
        z = torch.ones((2, 3))
        with pytest.raises(InputError):
            info_nce(torch.ones((0, 3)), torch.ones((0, 3)), 0.1)
        with pytest.raises(InputError):
            info_nce(z, torch.ones((3, 3)), 0.1)
        with pytest.raises(InputError):
            info_nce(z, z, -1.0)


class TestEncoderInterface:
    def test_embeddings_unit_norm(self):
        bundle = EncoderBundle(4, 64)
        img = np.random.default_rng(0).random((112, 112, 3))
        z = bundle.encode_face(img)
        assert np.linalg.norm(z.vector) == pytest.approx(1.0, abs=1e-6)
        codes = CodeGrid(np.random.default_rng(1).integers(0, 64, (4, 60)))
        za = bundle.encode_audio(codes)
        assert np.linalg.norm(za.vector) == pytest.approx(1.0, abs=1e-6)
        assert z.modality == "face" and za.modality == "audio"

    def test_face_shape_enforced(self):
        bundle = EncoderBundle(4, 64)
        with pytest.raises(InputError):
            bundle.encode_face(np.zeros((64, 64, 3)))

    def test_audio_length_bounds(self):
        bundle = EncoderBundle(4, 64)
        short = CodeGrid(np.zeros((4, 10), dtype=np.int64))
        with pytest.raises(InputError):
            bundle.encode_audio(short)
        with pytest.raises(InputError):
            bundle.encode_audio(CodeGrid(np.zeros((4, 100), dtype=np.int64)), training=True)

    def test_voice_embedding_validation(self):
        with pytest.raises(InputError):
            VoiceEmbedding(np.zeros(10), "face")
        with pytest.raises(InputError):
            VoiceEmbedding(np.zeros(EMBED_DIM), "text")

    def test_tile_crop_bounds_and_content(self):
        rng = np.random.default_rng(7)
        codes = rng.integers(0, 64, (4, 40))
        for _ in range(20):
            seg = _tile_crop(codes, rng)
            assert 150 <= seg.shape[1] <= 250
            # every column of the crop appears in the source grid
            assert set(map(tuple, seg.T)) <= set(map(tuple, codes.T))

    def test_retrieval_eval_aligned_and_chance(self):
        bundle = EncoderBundle(4, 64)
        rng = np.random.default_rng(8)
        pairs = [
            (rng.random((112, 112, 3)), CodeGrid(rng.integers(0, 64, (4, 80))))
            for _ in range(4)
        ]
        acc = retrieval_eval(bundle, pairs)
        assert 0.0 <= acc <= 1.0
        with pytest.raises(InputError):
            retrieval_eval(bundle, pairs[:1])

    def test_checkpoint_round_trip(self, tmp_path):
        bundle = EncoderBundle(4, 64)
        img = np.random.default_rng(0).random((112, 112, 3))
        before = bundle.encode_face(img).vector
        save_encoders(tmp_path / "enc.pt", bundle, meta={"note": 1})
        loaded = load_encoders(tmp_path / "enc.pt")
        after = loaded.encode_face(img).vector
        assert np.allclose(before, after)
