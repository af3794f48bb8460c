import math
import struct
import wave

import numpy as np
import pytest

from septda.frontend import (
    AudioSignal, ChunkTensor, Decoder, Encoder, WavFormatError, num_chunks, num_frames,
    overlap_add, overlap_counts, read_wav, segment, write_wav,
)
from septda.numerics import Tensor, check_gradients


class TestWav:
    def test_round_trip_within_one_step(self, tmp_path, rng):
        x = np.clip(rng.normal(scale=0.4, size=5000), -1, 1)
        x[:3] = [-1.0, 1.0, 0.99999]
        write_wav(tmp_path / "a.wav", AudioSignal(x, 8000))
        y = read_wav(tmp_path / "a.wav")
        assert y.sample_rate == 8000
        assert len(y) == len(x)
        assert np.max(np.abs(y.samples - x)) <= 2.0**-15
        assert np.all(y.samples >= -1.0) and np.all(y.samples < 1.0)

    def test_empty_data_chunk(self, tmp_path):
        with wave.open(str(tmp_path / "e.wav"), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(8000)
        with pytest.raises(WavFormatError, match="empty"):
            read_wav(tmp_path / "e.wav")

    def test_multichannel_rejected(self, tmp_path):
        with wave.open(str(tmp_path / "s.wav"), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(8000)
            f.writeframes(b"\x00\x00" * 20)
        with pytest.raises(WavFormatError, match="mono"):
            read_wav(tmp_path / "s.wav")

    def test_8bit_rejected(self, tmp_path):
        with wave.open(str(tmp_path / "b.wav"), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(1)
            f.setframerate(8000)
            f.writeframes(b"\x80" * 20)
        with pytest.raises(WavFormatError, match="16-bit"):
            read_wav(tmp_path / "b.wav")

    def test_truncated_file(self, tmp_path):
        write_wav(tmp_path / "t.wav", AudioSignal(np.zeros(100), 8000))
        raw = (tmp_path / "t.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(raw[:-51])
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "t.wav")

    def test_not_riff(self, tmp_path):
        (tmp_path / "n.wav").write_bytes(b"OggS" + bytes(60))
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "n.wav")

    def test_header_rate(self, tmp_path):
        write_wav(tmp_path / "r.wav", AudioSignal(np.zeros(10), 8000))
        assert struct.unpack("<I", (tmp_path / "r.wav").read_bytes()[24:28])[0] == 8000
        assert read_wav(tmp_path / "r.wav").sample_rate == 8000


class TestEncoderDecoder:
    def test_reference_frame_count(self):
        assert num_frames(32000, 16) == 4000

    @pytest.mark.parametrize("L", [4, 8, 16])
    def test_frame_count_sweep(self, L):
        rng = np.random.default_rng(L)
        enc = Encoder(L, 3, rng)
        for T in range(1, 201):
            assert enc(np.zeros(T)).shape == (math.ceil(2 * T / L), 3)

    def test_reference_channels(self, rng):
        assert Encoder(16, 256, rng)(rng.normal(size=100)).shape[1] == 256

    def test_zero_input_gives_zero_frames(self, rng):
        out = Encoder(16, 8, rng)(np.zeros(64))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_odd_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            Encoder(5, 4, rng)

    def test_empty_signal_rejected(self, rng):
        with pytest.raises(ValueError):
            Encoder(16, 4, rng)(np.zeros(0))

    def test_encoder_matches_direct_convolution(self, rng):
        L, T = 8, 37
        enc = Encoder(L, 5, rng)
        x = rng.normal(size=T)
        padded = np.concatenate([x, np.zeros(L * 4)])
        n = num_frames(T, L)
        direct = np.array([padded[i * L // 2:i * L // 2 + L] @ enc.weight.data + enc.bias.data for i in range(n)])
        gelu = 0.5 * direct * (1 + np.vectorize(math.erf)(direct / math.sqrt(2)))
        np.testing.assert_allclose(enc(x).data, gelu, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("T", [1, 7, 8, 33, 100])
    def test_decoder_length(self, rng, T):
        dec = Decoder(8, 6, rng)
        z = Tensor(rng.normal(size=(num_frames(T, 8), 6)))
        assert dec(z, T).shape == (T,)
        assert dec(Tensor(rng.normal(size=(3, num_frames(T, 8), 6))), T).shape == (3, T)

    def test_decoder_silence(self, rng):
        dec = Decoder(8, 6, rng)
        np.testing.assert_array_equal(dec(Tensor(np.zeros((10, 6))), 40).data, 0.0)

    def test_decoder_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            Decoder(8, 6, rng)(Tensor(np.zeros((10, 5))), 40)

    def test_decoder_matches_transposed_convolution(self, rng):
        L, n, ch = 6, 5, 4
        dec = Decoder(L, ch, rng)
        z = rng.normal(size=(n, ch))
        out = np.zeros(L // 2 * (n - 1) + L)
        for i in range(n):
            out[i * L // 2:i * L // 2 + L] += z[i] @ dec.weight.data
        np.testing.assert_allclose(dec(Tensor(z), 14).data, out[:14] + dec.bias.data, rtol=1e-5)

    def test_gradients(self, rng):
        enc = Encoder(4, 3, rng).astype(np.float64)
        dec = Decoder(4, 3, rng).astype(np.float64)
        x = Tensor(rng.normal(size=11), requires_grad=True)
        r = rng.normal(size=11)
        params = [x] + enc.parameters() + dec.parameters()
        assert check_gradients(lambda: (dec(enc(x), 11) * r).sum(), params) < 1e-4


class TestSegmentation:
    def test_exact_cover(self, rng):
        x = rng.normal(size=(8, 3))
        ch = segment(Tensor(x), 4)
        assert ch.chunks.shape == (4, 3, 3)
        for s, start in enumerate([0, 2, 4]):
            np.testing.assert_array_equal(ch.chunks.data[:, s], x[start:start + 4])

    def test_padded_tail(self, rng):
        x = rng.normal(size=(7, 2))
        ch = segment(Tensor(x), 4)
        assert ch.num_chunks == 3
        np.testing.assert_array_equal(ch.chunks.data[3, 2], 0.0)
        np.testing.assert_array_equal(ch.chunks.data[:3, 2], x[4:7])

    def test_reference_geometry(self):
        assert num_chunks(4000, 96) == math.ceil((4000 - 96) / 48) + 1
        assert 48 * (num_chunks(4000, 96) - 1) + 96 >= 4000

    def test_minimal_chunk_count(self):
        for K in range(2, 20):
            hop = math.ceil(K / 2)
            for n in range(1, 60):
                s = num_chunks(n, K)
                assert hop * (s - 1) + K >= n
                assert s == 1 or hop * (s - 2) + K < n

    def test_zero_frames(self):
        with pytest.raises(ValueError):
            segment(Tensor(np.zeros((0, 3))), 4)

    def test_small_chunk(self):
        with pytest.raises(ValueError):
            segment(Tensor(np.zeros((5, 3))), 1)

    def test_round_trip(self, rng):
        for _ in range(50):
            n, K = int(rng.integers(1, 120)), int(rng.integers(2, 40))
            x = rng.normal(size=(n, 3))
            np.testing.assert_allclose(overlap_add(segment(Tensor(x), K)).data, x, rtol=1e-12)

    def test_interior_overlap_two(self):
        counts = overlap_counts(50, 8)
        assert np.all(counts[4:-4] == 2)

    def test_single_chunk_identity(self, rng):
        x = rng.normal(size=(6, 2))
        ch = segment(Tensor(x), 6)
        assert ch.num_chunks == 1
        np.testing.assert_array_equal(overlap_add(ch).data, x)

    def test_geometry_mismatch(self, rng):
        ch = segment(Tensor(rng.normal(size=(20, 2))), 4)
        with pytest.raises(ValueError, match="geometry"):
            overlap_add(ChunkTensor(ch.chunks, 40))

    def test_batched_overlap_add(self, rng):
        x = rng.normal(size=(3, 17, 2))
        np.testing.assert_allclose(overlap_add(segment(Tensor(x), 6)).data, x, rtol=1e-12)
