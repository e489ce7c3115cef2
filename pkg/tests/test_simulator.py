import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rirfield.errors import CoincidentEndpoints, IoError, OutOfRoom
from rirfield.rir import broadband_rt60, read_wav
from rirfield.simulator import CorpusRecipe, ShoeboxRoom, generate_corpus, image_source_rir, read_jsonl

FS = 16000
C = 343.0


def room(dims=(5.0, 4.0, 3.0), alpha=0.3, **kw) -> ShoeboxRoom:
    return ShoeboxRoom(np.array(dims), alpha, **kw)


def test_direct_path_1m():
    h = image_source_rir(room(), (1, 1.5, 1.2), (2, 1.5, 1.2), max_order=0, length_s=0.01).samples
    t = 1.0 / C * FS  # 46.65 samples
    k = int(np.floor(t))
    assert k == 46
    assert h[46] == pytest.approx(1 - (t - k)) and h[47] == pytest.approx(t - k)
    assert h.sum() == pytest.approx(1.0)
    assert np.count_nonzero(h) == 2


def test_direct_path_2m_amplitude():
    h = image_source_rir(room(), (1, 1.5, 1.2), (3, 1.5, 1.2), max_order=0, length_s=0.02).samples
    assert h.sum() == pytest.approx(0.5)


@pytest.mark.parametrize("src, rcv", [((1, 1, 1), (1, 1, 1))])
def test_coincident(src, rcv):
    with pytest.raises(CoincidentEndpoints):
        image_source_rir(room(), src, rcv, 1, 0.1)


@pytest.mark.parametrize("p", [(0, 1, 1), (5, 1, 1), (6, 1, 1), (1, -1, 1)])
def test_out_of_room(p):
    with pytest.raises(OutOfRoom):
        image_source_rir(room(), p, (2, 2, 2), 1, 0.1)
    with pytest.raises(OutOfRoom):
        image_source_rir(room(), (2, 2, 2), p, 1, 0.1)


def test_room_validation():
    with pytest.raises(ValueError):
        room(alpha=0.0)
    with pytest.raises(ValueError):
        room(alpha=1.2)
    with pytest.raises(ValueError):
        room(dims=(0, 1, 1))
    assert room(alpha=np.full(6, 0.2)).absorption.shape == (6, 6)


def test_first_order_reflection_from_floor():
    # one wall fully reflective in the z=0 direction: the floor image lies at z=-1.2
    r = room(alpha=np.array([1, 1, 1, 1, 1e-9, 1]))
    src, rcv = np.array([2.0, 2.0, 1.2]), np.array([3.0, 2.0, 1.2])
    h = image_source_rir(r, src, rcv, max_order=1, length_s=0.05).samples
    d = np.hypot(1.0, 2.4)
    t = d / C * FS
    k = int(np.floor(t))
    assert h[k] + h[k + 1] == pytest.approx(1.0 / d, rel=1e-6)


def test_direct_delay_within_one_sample():
    rng = np.random.default_rng(0)
    for _ in range(10):
        dims = rng.uniform(3, 8, 3)
        src, rcv = rng.uniform(0.3, dims - 0.3), rng.uniform(0.3, dims - 0.3)
        h = image_source_rir(room(dims), src, rcv, 2, 0.1).samples
        # the direct path is the first arrival (not always the tallest sample: the
        # two-tap delay can split it below an unsplit early reflection)
        assert abs(np.flatnonzero(h)[0] - np.linalg.norm(src - rcv) / C * FS) <= 1.0


def test_energy_non_decreasing_in_order():
    r = room()
    e = [(image_source_rir(r, (1, 1.5, 1.2), (3.5, 2.5, 1.7), n, 0.3).samples ** 2).sum() for n in range(6)]
    assert all(b >= a for a, b in zip(e, e[1:]))


def test_spec_room_near_sabine():
    r = room(alpha=0.3)
    assert r.sabine_rt60() == pytest.approx(0.161 * 60 / (94 * 0.3))
    ir = image_source_rir(r, (1, 1.5, 1.2), (3.5, 2.5, 1.7), max_order=30, length_s=0.6)
    assert abs(broadband_rt60(ir) / r.sabine_rt60() - 1) < 0.25


def test_absorption_monotonicity_example():
    src, rcv = (1, 1.5, 1.2), (3.5, 2.5, 1.7)
    live = broadband_rt60(image_source_rir(room(alpha=0.05), src, rcv, 30, 1.0))
    dead = broadband_rt60(image_source_rir(room(alpha=0.5), src, rcv, 30, 1.0))
    assert live > dead


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_doubling_absorption_never_increases_rt60(seed):
    rng = np.random.default_rng(seed)
    dims = rng.uniform(3, 6, 3)
    a = rng.uniform(0.1, 0.45, 6)
    src, rcv = rng.uniform(0.5, dims - 0.5), rng.uniform(0.5, dims - 0.5)
    t1 = broadband_rt60(image_source_rir(room(dims, a), src, rcv, 20, 0.6))
    t2 = broadband_rt60(image_source_rir(room(dims, 2 * a), src, rcv, 20, 0.6))
    assert t2 <= t1


def test_flat_absorption_matches_broadband_sum():
    # per-band residuals vanish when absorption is frequency independent
    flat = room(alpha=np.full((6, 6), 0.3))
    h = image_source_rir(flat, (1, 1.5, 1.2), (3.5, 2.5, 1.7), 5, 0.1).samples
    one = ShoeboxRoom(np.array([5.0, 4.0, 3.0]), 0.3, bands=flat.bands)
    np.testing.assert_array_equal(h, image_source_rir(one, (1, 1.5, 1.2), (3.5, 2.5, 1.7), 5, 0.1).samples)


def test_tilted_absorption_changes_band_decay():
    from rirfield.rir import BandSpec, multiband_rt60

    a = np.tile(np.linspace(0.1, 0.6, 6), (6, 1))  # high bands absorb more
    ir = image_source_rir(room(alpha=a), (1, 1.5, 1.2), (3.5, 2.5, 1.7), 30, 1.0)
    fp = multiband_rt60(ir, BandSpec())
    assert fp.rt60_s[1] > fp.rt60_s[-1]


def test_generate_corpus_counts_and_determinism(tmp_path):
    recipe = CorpusRecipe(rooms=3, pairs_per_room=2, length_s=0.2, max_order=6)
    rooms, recs = generate_corpus(recipe, 5, tmp_path / "a")
    assert len(rooms) == 3 and len(recs) == 6
    rows = read_jsonl(tmp_path / "a" / "manifest.jsonl")
    assert [r["rir_id"] for r in rows] == [f"room{r:03d}_p{p:03d}" for r in range(3) for p in range(2)]
    assert set(rows[0]) == {"rir_id", "room_id", "wav_path", "src", "rcv", "sample_rate"}
    table = read_jsonl(tmp_path / "a" / "rooms.jsonl")
    assert {"room_id", "bbox", "dims"} <= set(table[0])
    ir = read_wav(tmp_path / "a" / rows[0]["wav_path"])
    assert ir.samples.size == int(0.2 * FS)

    generate_corpus(recipe, 5, tmp_path / "b")
    for name in ("manifest.jsonl", "rooms.jsonl", f"wavs/{rows[-1]['rir_id']}.wav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_corpus_spec_sizes(tmp_path):
    recipe = CorpusRecipe(rooms=20, pairs_per_room=10, length_s=0.05, max_order=1)
    _, recs = generate_corpus(recipe, 0, tmp_path)
    assert len(recs) == 200 and len(list((tmp_path / "wavs").glob("*.wav"))) == 200


def test_generate_corpus_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        generate_corpus(CorpusRecipe(rooms=1, pairs_per_room=1, length_s=0.05, max_order=0), 0, blocker / "sub")


def test_highpass_removes_dc_bias():
    # a dense positive pulse train carries a DC offset that lengthens the decay
    r = room((6.5, 4.3, 3.0), alpha=0.3)
    src, rcv = (1.2, 1.5, 1.3), (4.1, 2.9, 1.7)
    raw = image_source_rir(r, src, rcv, 60, 1.2)
    hp = image_source_rir(r, src, rcv, 60, 1.2, highpass_hz=10.0)
    assert abs(hp.samples.sum()) < 0.05 * abs(raw.samples.sum())
    assert abs(broadband_rt60(hp) / r.sabine_rt60() - 1) < abs(broadband_rt60(raw) / r.sabine_rt60() - 1)
    with pytest.raises(ValueError):
        image_source_rir(r, src, rcv, 1, 0.1, highpass_hz=9000.0)
