"""Speech LM structural tests: causality, pad masking, finite-difference
gradients, target construction, and training plumbing."""
import numpy as np
import pytest
import torch

from facespeak.codec import PAD_DELAY, CodeGrid, apply_delay
from facespeak.encoders import EncoderBundle
from facespeak.errors import ConfigError, DataError, InputError
from facespeak.speechlm import (
    DurationPredictor,
    LMConfig,
    SpeechLM,
    TrainLMConfig,
    TrainingSample,
    build_input_columns,
    build_target_columns,
    fit_duration,
    lm_loss,
    load_lm,
    save_lm,
    train_lm,
)

SMALL = LMConfig(layers=2, heads=2, d_model=32, d_ff=64, levels=3, codebook_size=16,
                 dropout=0.0, max_positions=128)


def make_model(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    model = SpeechLM(cfg)
    model.eval()
    return model


def random_inputs(cfg, T=12, B=1, seed=0):
    rng = np.random.default_rng(seed)
    grid = CodeGrid(rng.integers(0, cfg.codebook_size, (cfg.levels, T)))
    targets = build_target_columns(grid, cfg)
    inputs = build_input_columns(targets, cfg)
    text = torch.tensor([[1, 2, 3, 4]] * B)
    inp = torch.from_numpy(inputs)[None].repeat(B, 1, 1)
    tgt = torch.from_numpy(targets)[None].repeat(B, 1, 1)
    cond = torch.randn(B, 5, cfg.d_model)
    return text, inp, tgt, cond, grid


class TestTargetConstruction:
    def test_layout_and_eos(self):
        cfg = SMALL
        grid = CodeGrid(np.arange(12).reshape(3, 4) % cfg.codebook_size)
        tgt = build_target_columns(grid, cfg)
        assert tgt.shape == (3, 4 + 3)
        delayed = apply_delay(grid).codes
        for l in range(3):
            for t in range(delayed.shape[1]):
                if (l, t) == (0, grid.length):
                    continue  # EOS replaces the first level-0 pad
                want = delayed[l, t]
                assert tgt[l, t] == (cfg.pad_id if want == PAD_DELAY else want)
        assert tgt[0, grid.length] == cfg.eos_id
        assert np.all(tgt[:, -1][1:] == cfg.pad_id)

    def test_inputs_are_shifted_targets_after_bos(self):
        cfg = SMALL
        grid = CodeGrid(np.zeros((3, 5), dtype=np.int64))
        tgt = build_target_columns(grid, cfg)
        inp = build_input_columns(tgt, cfg)
        assert np.all(inp[:, 0] == cfg.bos_id)
        assert np.array_equal(inp[:, 1:], tgt[:, :-1])

    def test_delay_consistency_bit_for_bit(self):
        cfg = SMALL
        rng = np.random.default_rng(3)
        grid = CodeGrid(rng.integers(0, cfg.codebook_size, (3, 9)))
        tgt = build_target_columns(grid, cfg)
        delayed = apply_delay(grid).codes
        region = tgt[:, : delayed.shape[1]]
        mask = delayed != PAD_DELAY
        assert np.array_equal(region[mask], delayed[mask])


class TestCausality:
    def test_future_perturbation_does_not_change_past(self):
        model = make_model()
        text, inp, tgt, cond, _ = random_inputs(SMALL, T=10)
        with torch.no_grad():
            base = model.lm_forward(text, inp, cond)
        for t_perturb in (4, 7, 9):
            inp2 = inp.clone()
            inp2[0, :, t_perturb:] = (inp2[0, :, t_perturb:] + 1) % SMALL.codebook_size
            with torch.no_grad():
                out = model.lm_forward(text, inp2, cond)
            assert torch.equal(base[0, :, :t_perturb], out[0, :, :t_perturb])

    def test_pad_positions_contribute_zero_loss(self):
        model = make_model()
        text, inp, tgt, cond, _ = random_inputs(SMALL, T=8)
        with torch.no_grad():
            logits = model.lm_forward(text, inp, cond)
        base = float(lm_loss(logits, tgt, SMALL.pad_id))
        # pad targets may take any value without affecting the loss
        pad_mask = tgt == SMALL.pad_id
        assert bool(pad_mask.any())
        poisoned = tgt.clone()
        poisoned[pad_mask] = 0
        assert float(lm_loss(logits, poisoned, SMALL.pad_id)) == pytest.approx(base)
        # flipping one non-pad target does change the loss
        flipped = tgt.clone()
        nz = torch.nonzero(~pad_mask)[0]
        flipped[tuple(nz)] = (flipped[tuple(nz)] + 1) % SMALL.codebook_size
        assert float(lm_loss(logits, flipped, SMALL.pad_id)) != pytest.approx(base)

    def test_eos_weighting_matches_manual_computation(self):
        cfg = SMALL
        rng = np.random.default_rng(11)
        grid = CodeGrid(rng.integers(0, cfg.codebook_size, (3, 5)))
        tgt = torch.from_numpy(build_target_columns(grid, cfg))[None]
        logits = torch.tensor(rng.standard_normal((1, 3, tgt.shape[-1], cfg.vocab)))
        base = float(lm_loss(logits, tgt, cfg.pad_id))
        weighted = float(lm_loss(logits, tgt, cfg.pad_id, cfg.eos_id, 5.0))
        mask = tgt != cfg.pad_id
        per = torch.nn.functional.cross_entropy(
            logits[mask], tgt[mask], reduction="none")
        w = torch.where(tgt[mask] == cfg.eos_id, 5.0, 1.0)
        assert weighted == pytest.approx(float((per * w).sum() / w.sum()))
        assert weighted != pytest.approx(base)
        # weight 1.0 reduces to the plain loss
        assert float(lm_loss(logits, tgt, cfg.pad_id, cfg.eos_id, 1.0)) == pytest.approx(base)

    def test_all_pad_rejected(self):
        with pytest.raises(InputError):
            lm_loss(torch.zeros(1, 3, 2, SMALL.vocab),
                    torch.full((1, 3, 2), SMALL.pad_id), SMALL.pad_id)


class TestGradients:
    def test_parameter_slice_matches_finite_differences(self):
        cfg = SMALL
        model = make_model(cfg).double()
        text, inp, tgt, cond, _ = random_inputs(cfg, T=6)
        cond = cond.double()

        def loss_value():
            return lm_loss(model.lm_forward(text, inp, cond), tgt, cfg.pad_id)

        loss = loss_value()
        model.zero_grad()
        loss.backward()
        param = model.heads[0].bias
        eps = 1e-6
        for idx in (0, 3, 10):
            with torch.no_grad():
                param[idx] += eps
                up = float(loss_value())
                param[idx] -= 2 * eps
                dn = float(loss_value())
                param[idx] += eps
            fd = (up - dn) / (2 * eps)
            got = float(param.grad[idx])
            assert abs(got - fd) <= 1e-3 * max(abs(fd), 1e-8)


class TestTrainingPlumbing:
    def bundle(self):
        torch.manual_seed(0)
        return EncoderBundle(SMALL.levels, SMALL.codebook_size)

    def sample(self, source, seed=0):
        rng = np.random.default_rng(seed)
        face = rng.random((112, 112, 3)) if source == "audio_visual" else None
        # repetitive codes keep the toy objective learnable within a few steps
        column = rng.integers(0, SMALL.codebook_size, (SMALL.levels, 1))
        return TrainingSample(
            source=source,
            input_text="hello there",
            codes=CodeGrid(np.tile(column, (1, 20))),
            description="The pace of speech is slow.",
            face=face,
        )

    def test_av_sample_without_face_rejected(self):
        with pytest.raises(DataError):
            TrainingSample(
                source="audio_visual", input_text="x",
                codes=CodeGrid(np.zeros((3, 5), dtype=np.int64)),
                description="d",
            )

    def test_alternation_requires_both_sources(self):
        samples = [self.sample("audio_only", i) for i in range(4)]
        with pytest.raises(ConfigError):
            train_lm(samples, SMALL, TrainLMConfig(steps=1, batch_size=2), self.bundle())

    def test_steps_zero_leaves_params_unchanged(self):
        samples = [self.sample("audio_visual", 1), self.sample("audio_only", 2)]
        torch.manual_seed(5)
        model = SpeechLM(SMALL)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model2, report = train_lm(
            samples, SMALL, TrainLMConfig(steps=0, batch_size=2), self.bundle(),
            model=model,
        )
        for k, v in model2.state_dict().items():
            assert torch.equal(before[k], v)
        assert report["final_loss"] is None

    def test_short_training_reduces_loss(self):
        samples = [self.sample("audio_visual", i) for i in range(3)]
        samples += [self.sample("audio_only", i + 10) for i in range(3)]
        _, report = train_lm(
            samples, SMALL,
            TrainLMConfig(steps=60, batch_size=2, warmup=5, lr=1e-3, report_every=10),
            self.bundle(),
        )
        curve = report["loss_curve"]
        assert curve[-1][1] < curve[0][1]
        assert report["per_source_final"]["audio_visual"] is not None
        assert report["per_source_final"]["audio_only"] is not None
        assert report["ln_vocab"] == pytest.approx(np.log(SMALL.vocab))

    def test_checkpoint_round_trip(self, tmp_path):
        model = make_model()
        text, inp, tgt, cond, _ = random_inputs(SMALL, T=5)
        with torch.no_grad():
            before = model.lm_forward(text, inp, cond)
        save_lm(tmp_path / "lm.pt", model)
        loaded = load_lm(tmp_path / "lm.pt")
        with torch.no_grad():
            after = loaded.lm_forward(text, inp, cond)
        assert torch.allclose(before, after)


class TestDurationPredictor:
    @staticmethod
    def _samples():
        """Synthetic corpus where the style word fully determines length."""
        rng = np.random.default_rng(3)
        samples = []
        for i in range(40):
            label, frames = [("slow", 200), ("moderate", 140), ("fast", 100)][i % 3]
            frames += int(rng.integers(-5, 6))
            codes = CodeGrid(rng.integers(0, 16, (3, frames)))
            samples.append(
                TrainingSample(
                    source="audio_only",
                    input_text="the same words every time",
                    codes=codes,
                    description=f"The speaker talks at a {label} pace.",
                )
            )
        return samples

    def test_fit_recovers_style_conditional_means(self):
        head = DurationPredictor(d=32)
        mse = fit_duration(head, self._samples(), steps=600)
        # the empty-description rows are only predictable to the marginal
        # mean, which leaves about var(log frames) / 3 of irreducible error
        assert mse < 0.04
        n_ph = 20
        slow = head.predict_frames(n_ph, "The speaker talks at a slow pace.")
        mod = head.predict_frames(n_ph, "The speaker talks at a moderate pace.")
        fast = head.predict_frames(n_ph, "The speaker talks at a fast pace.")
        assert slow > mod > fast
        assert abs(slow - 200) < 20 and abs(mod - 140) < 15 and abs(fast - 100) < 12
        # no description: prediction falls inside the overall range
        none = head.predict_frames(n_ph, "")
        assert fast < none < slow

    def test_fit_is_deterministic(self):
        torch.manual_seed(7)
        a = DurationPredictor(d=16)
        torch.manual_seed(7)
        b = DurationPredictor(d=16)
        fit_duration(a, self._samples(), steps=50)
        fit_duration(b, self._samples(), steps=50)
        assert a.predict_frames(10, "fast.") == b.predict_frames(10, "fast.")

    def test_predict_frames_is_positive_int(self):
        head = DurationPredictor(d=16)
        out = head.predict_frames(1, "")
        assert isinstance(out, int) and out >= 1

    def test_text_length_feeds_prediction(self):
        head = DurationPredictor(d=32)
        rng = np.random.default_rng(0)
        samples = [
            TrainingSample(
                source="audio_only",
                input_text="word " * k,
                codes=CodeGrid(rng.integers(0, 16, (3, 30 + 10 * k))),
                description="A plain voice.",
            )
            for k in range(1, 9)
            for _ in range(4)
        ]
        fit_duration(head, samples, steps=600)
        short = head.predict_frames(3, "A plain voice.")
        long = head.predict_frames(24, "A plain voice.")
        assert long > short


def test_config_validation():
    with pytest.raises(ConfigError):
        LMConfig(d_model=30, heads=4)
    cfg = LMConfig()
    assert (cfg.bos_id, cfg.pad_id, cfg.eos_id) == (64, 65, 66)
    assert cfg.vocab == 67
