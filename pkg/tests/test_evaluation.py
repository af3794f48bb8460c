import numpy as np
import pytest

from septda.data import (
    MixtureItem, MixtureSpec, load_manifest_items, read_manifest, simulate_mixture, simulate_to_dir,
    synthetic_dataset, synthetic_source, write_manifest,
)
from septda.evaluation import align_estimates, delta_si_sdr, evaluate, evaluate_unknown_count
from septda.frontend import AudioSignal, write_wav
from septda.model import NoSpeakersDetected, SeparationResult
from septda.objectives import si_sdr
from septda.tda import count_speakers


class FixtureModel:
    """Stands in for a trained network: fixed existence probabilities, estimates from a callback."""

    def __init__(self, probs, make_estimates):
        self.probs = np.asarray(probs, dtype=float)
        self.make_estimates = make_estimates

    def __call__(self, mixture, n_speakers="auto", training=False):
        if n_speakers == "auto":
            n_speakers = count_speakers(self.probs)
            if n_speakers == 0:
                raise NoSpeakersDetected(self.probs)
        return SeparationResult(self.make_estimates(mixture, n_speakers), self.probs, n_speakers)


@pytest.fixture
def items():
    return synthetic_dataset(3, 2, 0.05, seed=11)


def _oracle(items):
    lookup = {id(i.mixture): i for i in items}

    def make(mixture, n):
        refs = lookup[id(mixture)].references
        out = np.zeros((n, refs.shape[1]))
        out[:min(n, len(refs))] = refs[:n]
        return out[::-1].copy()  # reversed order exercises PIT

    return make


class TestSimulation:
    def test_references_sum_to_mixture(self, rng):
        srcs = [rng.normal(size=200) for _ in range(3)]
        mix, refs, levels = simulate_mixture(MixtureSpec(srcs, seed=1))
        np.testing.assert_array_equal(refs.sum(axis=0), mix)
        assert levels[0] == 0.0 and all(0.0 <= x <= 5.0 for x in levels[1:])

    def test_zero_db_is_plain_sum(self, rng):
        s = [synthetic_source(300, rng), synthetic_source(300, rng)]
        mix, refs, _ = simulate_mixture(MixtureSpec(s, levels_db=[0.0, 0.0]))
        if np.max(np.abs(s[0] + s[1])) <= 0.9:
            np.testing.assert_allclose(mix, s[0] + s[1], rtol=1e-12)
        else:
            np.testing.assert_allclose(mix / np.max(np.abs(mix)), (s[0] + s[1]) / np.max(np.abs(s[0] + s[1])),
                                       rtol=1e-12)

    def test_level_ratio(self, rng):
        s = [rng.normal(size=500) * 0.01, rng.normal(size=500) * 0.01]
        _, refs, _ = simulate_mixture(MixtureSpec(s, levels_db=[0.0, 3.0]))
        peaks = np.max(np.abs(refs), axis=1)
        assert 20 * np.log10(peaks[1] / peaks[0]) == pytest.approx(3.0, abs=1e-9)

    def test_no_clipping(self, rng):
        s = [np.ones(50), np.ones(50), np.ones(50)]
        mix, _, _ = simulate_mixture(MixtureSpec(s, levels_db=[0, 5, 5]))
        assert np.max(np.abs(mix)) <= 0.9 + 1e-12

    def test_deterministic(self, rng):
        s = [rng.normal(size=100) for _ in range(2)]
        a = simulate_mixture(MixtureSpec(s, seed=4))
        b = simulate_mixture(MixtureSpec(s, seed=4))
        np.testing.assert_array_equal(a[0], b[0])
        assert a[2] == b[2]

    def test_truncates_to_shortest(self, rng):
        mix, refs, _ = simulate_mixture(MixtureSpec([rng.normal(size=90), rng.normal(size=70)]))
        assert mix.shape == (70,) and refs.shape == (2, 70)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            simulate_mixture(MixtureSpec([]))
        with pytest.raises(ValueError, match="empty"):
            simulate_mixture(MixtureSpec([np.zeros(0), np.ones(3)]))
        with pytest.raises(ValueError, match="sample rate"):
            simulate_mixture(MixtureSpec([AudioSignal(np.ones(3), 8000), AudioSignal(np.ones(3), 16000)]))

    def test_dataset_deterministic(self):
        a, b = synthetic_dataset(2, 3, 0.02, seed=5), synthetic_dataset(2, 3, 0.02, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mixture, y.mixture)
        assert a[0].n_speakers == 3

    def test_simulate_to_dir(self, tmp_path, rng):
        src = tmp_path / "src"
        src.mkdir()
        for k in range(4):
            write_wav(src / f"s{k}.wav", AudioSignal(synthetic_source(400, rng), 8000))
        manifest = simulate_to_dir(src, 2, 3, 7, tmp_path / "out")
        text = manifest.read_text()
        assert text.count("# levels_db=") == 3
        rows = read_manifest(manifest)
        assert len(rows) == 3 and all(len(refs) == 2 for _, refs in rows)
        assert all(p.exists() for mix, refs in rows for p in [mix, *refs])
        loaded = load_manifest_items(manifest, 8000)
        assert np.max(np.abs(loaded[0].references.sum(axis=0) - loaded[0].mixture)) <= 3 * 2.0**-15
        again = simulate_to_dir(src, 2, 3, 7, tmp_path / "out2")
        assert (tmp_path / "out" / "mix_0001.wav").read_bytes() == (tmp_path / "out2" / "mix_0001.wav").read_bytes()
        assert again.read_text() == text

    def test_manifest_relative_paths(self, tmp_path):
        write_manifest(tmp_path / "m.tsv", [("a.wav", ["a/r1.wav", "a/r2.wav"], [0.0, 1.5])])
        assert read_manifest(tmp_path / "m.tsv") == [(tmp_path / "a.wav", [tmp_path / "a/r1.wav", tmp_path / "a/r2.wav"])]

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("only_mixture.wav\n")
        with pytest.raises(ValueError, match="reference"):
            read_manifest(tmp_path / "m.tsv")


class TestMetrics:
    def test_no_improvement(self, rng):
        ref, mix = rng.normal(size=50), rng.normal(size=50)
        assert delta_si_sdr(mix, ref, mix) == 0.0

    def test_perfect(self, rng):
        ref, mix = rng.normal(size=50), rng.normal(size=50)
        assert delta_si_sdr(mix, ref, ref) == pytest.approx(80.0 - si_sdr(ref, mix), abs=1e-12)

    def test_align(self):
        est = np.ones((3, 4))
        assert align_estimates(est, 2, 4).shape == (2, 4)
        padded = align_estimates(est[:1], 3, 4)
        np.testing.assert_array_equal(padded[1:], 0.0)


class TestProtocol:
    def test_known_count_perfect_oracle(self, items):
        report = evaluate(FixtureModel([0.9, 0.8, 0.3], _oracle(items)), items, known_count=True)
        for item, s in zip(sorted(items, key=lambda i: i.item_id), report.items):
            expected = np.mean([80.0 - si_sdr(r, item.mixture) for r in item.references])
            assert s.delta_si_sdr == pytest.approx(expected, abs=1e-12)
        assert "count_acc" not in report.table()
        assert report.counting_accuracy() == {}

    def test_full_accuracy_fixture(self, items):
        report = evaluate_unknown_count(FixtureModel([0.9, 0.8, 0.3, 0.1], _oracle(items)), items)
        assert report.counting_accuracy() == {2: 1.0}
        assert "100.00" in report.table()
        known = evaluate(FixtureModel([0.9, 0.8, 0.3], _oracle(items)), items, known_count=True)
        assert [s.delta_si_sdr for s in report.items] == [s.delta_si_sdr for s in known.items]

    def test_under_estimate_pads_silence(self, items):
        report = evaluate_unknown_count(FixtureModel([0.9, 0.2, 0.1], _oracle(items)), items)
        for item, s in zip(sorted(items, key=lambda i: i.item_id), report.items):
            assert s.estimated == 1
            # one reference is matched to the all-zero estimate, which scores -80 dB
            pens = [p + si_sdr(r, item.mixture) for p, r in zip(s.per_speaker, item.references)]
            assert sorted(np.round(pens, 9)) == [-80.0, 80.0]
        assert report.counting_accuracy() == {2: 0.0}
        assert report.confusion() == {(2, 1): 3}

    def test_over_estimate_keeps_first_slots(self, items):
        def make(mixture, n):
            ref = next(i for i in items if i.mixture is mixture).references
            return np.stack([ref[0], ref[1]] + [mixture] * (n - 2))

        report = evaluate_unknown_count(FixtureModel([0.9, 0.9, 0.9, 0.9, 0.2], make), items)
        assert all(s.estimated == 4 for s in report.items)
        for item, s in zip(sorted(items, key=lambda i: i.item_id), report.items):
            assert s.per_speaker == pytest.approx([80.0 - si_sdr(r, item.mixture) for r in item.references])

    def test_no_speakers_counts_as_zero(self, items):
        report = evaluate_unknown_count(FixtureModel([0.2, 0.9], _oracle(items)), items)
        for item, s in zip(sorted(items, key=lambda i: i.item_id), report.items):
            assert s.estimated == 0
            assert s.per_speaker == pytest.approx([-80.0 - si_sdr(r, item.mixture) for r in item.references])

    def test_report_sorted_and_grouped(self, items):
        mixed = items + synthetic_dataset(2, 3, 0.05, seed=12)
        for k, it in enumerate(mixed):
            it.item_id = f"{(7 * k) % 5:02d}"
        report = evaluate(FixtureModel([0.9, 0.9, 0.9, 0.2], _oracle(mixed)), mixed)
        assert [s.item_id for s in report.items] == sorted(s.item_id for s in report.items)
        assert set(report.mean_delta_by_count()) == {2, 3}
        assert report.counting_accuracy() == {2: 0.0, 3: 1.0}
