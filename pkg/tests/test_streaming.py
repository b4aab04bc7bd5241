import numpy as np
import pytest

from speakervc.audio import Waveform, resample
from speakervc.data import load_record
from speakervc.decoders import convert_mel
from speakervc.streaming import (
    StreamChunk, StreamConfig, StreamingConverter, frontend_lookahead_samples, measure_stream_rtf, split_chunks,
    stream_convert,
)

FAST = StreamConfig(gl_iterations=4)


@pytest.fixture(scope="module")
def source(small_corpus):
    """About 6 s of speech at 24 kHz, built from two utterances."""
    voiced, _ = small_corpus
    parts = [load_record(r) for r in voiced[:2]]
    x = np.concatenate([resample(p, 24000).samples for p in parts])
    return Waveform(x, 24000), load_record(voiced[6])


def _joined(pieces):
    return np.concatenate([p.samples for p in pieces])


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            StreamConfig(chunk_s=1.0, total_delay_s=0.5)
        with pytest.raises(ValueError):
            StreamConfig(past_context_s=-1)
        with pytest.raises(ValueError):
            StreamConfig(frontend_share=1.0)
        with pytest.raises(ValueError, match="multiple"):
            StreamConfig(chunk_s=0.205).chunk_frames

    def test_delay_budget_covers_frontend(self, tiny_system, source):
        assert frontend_lookahead_samples() == 512 + 2 * 240
        with pytest.raises(ValueError, match="delay budget"):
            StreamingConverter(tiny_system[0], source[1], StreamConfig(chunk_s=0.02, total_delay_s=0.06))


class TestStreaming:
    def test_empty_input(self, tiny_system, source):
        out = stream_convert([], source[1], tiny_system[0], FAST)
        assert _joined(out).size == 0

    def test_offline_parity_and_length(self, tiny_system, source):
        system = tiny_system[0]
        src, ref = source
        conv = StreamingConverter(system, ref, FAST, record_mel=True)
        out = stream_convert(split_chunks(src, [4800] * 1000), ref, system, converter=conv)
        offline = convert_mel(src, ref, system).values
        streamed = conv.mel().values
        assert streamed.shape == offline.shape
        assert np.max(np.abs(streamed - offline)) <= 1e-4
        assert abs(_joined(out).size - len(src)) <= 240

    def test_first_emission(self, tiny_system, source):
        src, ref = source
        conv = StreamingConverter(tiny_system[0], ref, FAST)
        stream_convert(split_chunks(src, [2400] * 1000), ref, tiny_system[0], converter=conv)
        assert conv.first_emission_at == 24000
        outs = [row["samples_out"] for row in conv.log]
        assert all(a <= b for a, b in zip(outs, outs[1:]))

    def test_partition_invariance(self, tiny_system, source):
        src, ref = source
        system = tiny_system[0]
        base = _joined(stream_convert(split_chunks(src, [4800] * 1000), ref, system, FAST)).tobytes()
        rng = np.random.default_rng(7)
        for _ in range(2):
            sizes = rng.integers(1, 4801, size=4000)
            assert _joined(stream_convert(split_chunks(src, sizes), ref, system, FAST)).tobytes() == base

    def test_past_context_bound(self, tiny_system, source):
        src, ref = source
        cfg = StreamConfig(gl_iterations=4, past_context_s=1.0)
        conv = StreamingConverter(tiny_system[0], ref, cfg)
        stream_convert(split_chunks(src, [4800] * 1000), ref, tiny_system[0], converter=conv)
        assert conv.oldest_read
        assert all(start - oldest <= 24000 for start, oldest in conv.oldest_read)
        assert conv.buffered_past_s <= 1.0 + 1e-9

    def test_order_and_rate_errors(self, tiny_system, source):
        src, ref = source
        conv = StreamingConverter(tiny_system[0], ref, FAST)
        conv.push(StreamChunk(0, Waveform(src.samples[:1000], 24000)))
        with pytest.raises(ValueError, match="out-of-order"):
            conv.push(StreamChunk(500, Waveform(src.samples[500:900], 24000)))
        with pytest.raises(ValueError, match="sample-rate change"):
            conv.push(Waveform(np.zeros(100), 16000))
        conv.finish()
        with pytest.raises(ValueError, match="finished"):
            conv.push(Waveform(np.zeros(100), 24000))

    def test_rtf_reported(self, tiny_system, source):
        src, ref = source
        conv = StreamingConverter(tiny_system[0], ref, FAST)
        stream_convert(split_chunks(src, [4800] * 1000), ref, tiny_system[0], converter=conv)
        assert measure_stream_rtf(conv) == pytest.approx(conv.compute_s / src.duration_s)


def test_split_chunks():
    w = Waveform(np.arange(10, dtype=float), 24000)
    parts = split_chunks(w, [3, 3])
    assert [len(p) for p in parts] == [3, 3, 4]
    assert _joined(parts).tolist() == list(range(10))
