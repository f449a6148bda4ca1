"""Corpus generator tests: manifest round trips, reproducibility, ground-truth
consistency, and the face-to-voice linear probe."""
import json

import numpy as np
import pytest

from facespeak.codec import Waveform
from facespeak.conditioning import GENDERED_WORD_RE, attribute_bins, SpeechAttributes
from facespeak.data import (
    CorpusConfig,
    ManifestRecord,
    SceneSpec,
    SpeakerSpec,
    UtteranceStyle,
    analytic_c50,
    build_corpus,
    load_bin_edges,
    load_face,
    load_manifest,
    load_style_pool,
    load_wav,
    make_speaker,
    phonemes_of,
    regenerate_ground_truth,
    render_face,
    scene_rir,
    synth_utterance,
)
from facespeak.errors import DataError, InputError

TINY = CorpusConfig(
    root_seed=11, train_speakers=6, val_speakers=2, test_speakers=12,
    train_av_speakers=4, val_av_speakers=1, utterances_per_speaker=2,
)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifests = build_corpus(root, TINY)
    return root, manifests


class TestSpeakersAndFaces:
    def test_speaker_spec_ranges(self):
        for seed in range(20):
            spk, face = make_speaker(seed)
            assert 80.0 <= spk.f0_base <= 400.0
            assert np.linalg.norm(spk.timbre) == pytest.approx(1.0, abs=1e-9)
            assert face.shape == (112, 112, 3)
            assert face.min() >= 0.0 and face.max() <= 1.0

    def test_spec_validation(self):
        with pytest.raises(InputError):
            SpeakerSpec("s", 50.0, 10.0, tuple([0.3] * 8), 10.0)
        with pytest.raises(InputError):
            SpeakerSpec("s", 200.0, 10.0, (0.5,), 10.0)

    def test_render_deterministic(self):
        spk, _ = make_speaker(3)
        assert np.array_equal(render_face(spk), render_face(spk))

    def test_face_to_f0_linear_probe(self):
        """Mutual information by construction: pixels -> f0_base, R^2 >= 0.5."""
        train = [make_speaker(s) for s in range(60)]
        held = [make_speaker(s) for s in range(60, 90)]

        def design(items):
            X = np.stack([f.reshape(-1)[::97] for _, f in items])  # subsample pixels
            X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
            y = np.array([spk.f0_base for spk, _ in items])
            return X, y

        Xtr, ytr = design(train)
        Xte, yte = design(held)
        w, *_ = np.linalg.lstsq(Xtr, ytr, rcond=1e-6)
        pred = Xte @ w
        ss_res = np.sum((yte - pred) ** 2)
        ss_tot = np.sum((yte - yte.mean()) ** 2)
        assert 1.0 - ss_res / ss_tot >= 0.5


class TestSynthesis:
    def spk(self):
        return make_speaker(7)[0]

    def test_phoneme_slots(self):
        assert phonemes_of("ab c2!") == ["a", "b", "c", "2"]

    def test_empty_text_rejected(self):
        rng = np.random.default_rng(0)
        scene = SceneSpec(snr_db=100.0, reflect_delay_ms=0.0, reflect_gain=0.0)
        with pytest.raises(InputError):
            synth_utterance(self.spk(), "!!!", scene, rng)

    def test_ground_truth_consistency(self):
        rng = np.random.default_rng(1)
        scene = SceneSpec(snr_db=20.0, reflect_delay_ms=30.0, reflect_gain=0.4)
        style = UtteranceStyle(speaking_rate=12.0, pitch_std_hz=25.0)
        wave, gt = synth_utterance(self.spk(), "hello world", scene, rng, style)
        assert gt.phoneme_count == 10
        assert gt.speaking_rate == pytest.approx(10 / gt.duration)
        assert wave.duration == pytest.approx(gt.duration)
        # mix equals reverberant + noise (clipped)
        assert np.allclose(
            wave.samples, np.clip(gt.reverberant + gt.noise, -1, 1), atol=1e-12)
        # realized noise matches the requested SNR within 0.5 dB
        got_snr = 10 * np.log10(np.mean(gt.reverberant ** 2) / np.mean(gt.noise ** 2))
        assert got_snr == pytest.approx(20.0, abs=0.5)

    def test_noiseless_above_snr_100(self):
        rng = np.random.default_rng(2)
        scene = SceneSpec(snr_db=100.0, reflect_delay_ms=0.0, reflect_gain=0.0)
        _, gt = synth_utterance(self.spk(), "abc", scene, rng)
        assert np.all(gt.noise == 0.0)

    def test_pitch_std_matches_target(self):
        rng = np.random.default_rng(3)
        scene = SceneSpec(snr_db=100.0, reflect_delay_ms=0.0, reflect_gain=0.0)
        style = UtteranceStyle(speaking_rate=10.0, pitch_std_hz=30.0)
        _, gt = synth_utterance(self.spk(), "hello there friend ok", scene, rng, style)
        assert gt.pitch_std_hz == pytest.approx(30.0, rel=0.1)

    def test_analytic_c50_matches_rir_metric(self):
        from facespeak.evalmetrics import c50_from_rir
        for delay, gain in ((30.0, 0.4), (70.0, 0.3), (0.0, 0.0)):
            scene = SceneSpec(snr_db=20.0, reflect_delay_ms=delay, reflect_gain=gain)
            rir = scene_rir(scene)
            assert analytic_c50(scene) == pytest.approx(
                c50_from_rir(Waveform(rir, 16000)), abs=1e-6)


class TestCorpusBuild:
    def test_split_sizes_and_sources(self, tiny_corpus):
        root, manifests = tiny_corpus
        train = load_manifest(manifests["train"])
        test = load_manifest(manifests["test"])
        assert len({r.speaker_id for r in train}) == TINY.train_speakers
        assert len({r.speaker_id for r in test}) == TINY.test_speakers
        av = {r.speaker_id for r in train if r.source == "audio_visual"}
        ao = {r.speaker_id for r in train if r.source == "audio_only"}
        assert len(av) == TINY.train_av_speakers
        assert len(ao) == TINY.train_speakers - TINY.train_av_speakers
        assert all(r.source == "audio_visual" for r in test)

    def test_audio_only_records_are_clean(self, tiny_corpus):
        root, manifests = tiny_corpus
        for rec in load_manifest(manifests["train"]):
            if rec.source == "audio_only":
                assert rec.face_path is None
                assert rec.snr_db >= TINY.ao_snr_range[0]
                assert rec.scene["reflect_gain"] == 0.0

    def test_durations_within_contract(self, tiny_corpus):
        root, manifests = tiny_corpus
        for split in ("train", "val", "test"):
            for rec in load_manifest(manifests[split]):
                assert 2.0 <= rec.duration <= 6.0

    def test_descriptions_neutral_and_bin_consistent(self, tiny_corpus):
        root, manifests = tiny_corpus
        edges = load_bin_edges(root)
        from facespeak.conditioning import PHRASE_BANK
        for rec in load_manifest(manifests["train"]):
            assert GENDERED_WORD_RE.search(rec.description) is None
            bins = attribute_bins(
                SpeechAttributes(rec.speaking_rate, rec.snr_db, rec.c50_db,
                                 rec.pitch_std_hz, rec.scene["public_speech"]),
                edges,
            )
            assert any(p in rec.description for p in PHRASE_BANK["pace"][bins["pace"]])
            assert any(p in rec.description for p in PHRASE_BANK["tone"][bins["tone"]])

    def test_reproducible_from_root_seed(self, tiny_corpus, tmp_path):
        root, manifests = tiny_corpus
        build_corpus(tmp_path, TINY)
        a = (root / "manifests" / "train.jsonl").read_text()
        b = (tmp_path / "manifests" / "train.jsonl").read_text()
        assert a == b

    def test_regeneration_is_bit_exact(self, tiny_corpus):
        root, manifests = tiny_corpus
        rec = load_manifest(manifests["test"])[0]
        stored = load_wav(root / rec.audio_path)
        wave, gt = regenerate_ground_truth(rec, TINY)
        # stored wav went through 16-bit quantization
        assert np.max(np.abs(stored.samples - wave.samples)) < 1.0 / 32767.0
        assert gt.phoneme_count == rec.phoneme_count
        assert gt.pitch_std_hz == pytest.approx(rec.pitch_std_hz)
        assert gt.c50_db == pytest.approx(rec.c50_db)

    def test_assets_exist(self, tiny_corpus):
        root, manifests = tiny_corpus
        rec = load_manifest(manifests["test"])[0]
        assert load_face(root / rec.face_path).shape == (112, 112, 3)
        assert len(load_style_pool(root)) == TINY.style_pool_size
        assert load_bin_edges(root).snr_lo < load_bin_edges(root).snr_hi


class TestManifestIO:
    def test_round_trip_identity(self, tiny_corpus):
        root, manifests = tiny_corpus
        recs = load_manifest(manifests["val"])
        line = recs[0].to_json()
        assert ManifestRecord.from_json(line).to_json() == line

    def test_empty_file_gives_empty_list(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_manifest(p) == []

    def test_corrupted_line_names_location(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(DataError, match="bad.jsonl:1"):
            load_manifest(p)

    def test_schema_version_enforced(self, tiny_corpus, tmp_path):
        root, manifests = tiny_corpus
        obj = json.loads(manifests["val"].read_text().splitlines()[0])
        obj["schema_version"] = 99
        p = tmp_path / "v.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DataError, match="v.jsonl:1"):
            load_manifest(p)

    def test_av_without_face_rejected(self, tiny_corpus, tmp_path):
        root, manifests = tiny_corpus
        obj = json.loads(manifests["test"].read_text().splitlines()[0])
        obj["face_path"] = None
        p = tmp_path / "f.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DataError):
            load_manifest(p)
