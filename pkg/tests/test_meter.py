import threading

import numpy as np
import pytest

from rowcnn import column, engine
from rowcnn.errors import CorruptStateError, InvalidArgumentError
from rowcnn.meter import Category, MemoryMeter
from rowcnn.netspec import init_params, load_config
from rowcnn.planner import MemoryModel, build_plan, omega_total


def test_alloc_then_free():
    m = MemoryMeter()
    h = m.track_alloc(100, Category.OTHER)
    m.track_free(h)
    rep = m.snapshot()
    assert rep.peak[Category.OTHER] == 100 and rep.current[Category.OTHER] == 0
    assert rep.global_peak == 100


def test_interleaved_peak():
    m = MemoryMeter()
    a = m.track_alloc(100, Category.FEATURE_MAP)
    m.track_alloc(50, Category.FEATURE_MAP)
    m.track_free(a)
    m.track_alloc(80, Category.FEATURE_MAP)
    assert m.peak[Category.FEATURE_MAP] == 150
    assert m.current[Category.FEATURE_MAP] == 130


def test_double_free_and_bad_sizes():
    m = MemoryMeter()
    h = m.track_alloc(8, Category.GRADS)
    m.track_free(h)
    with pytest.raises(CorruptStateError):
        m.track_free(h)
    with pytest.raises(CorruptStateError):
        m.track_free(12345)
    with pytest.raises(InvalidArgumentError):
        m.track_alloc(-1, Category.GRADS)


def test_empty_run_is_all_zero():
    rep = MemoryMeter().snapshot()
    assert not any(rep.current.values()) and not any(rep.peak.values())
    assert rep.global_peak == 0 and rep.events == []


def test_element_size_scales_bytes():
    m = MemoryMeter(element_size=4)
    m.alloc_array(np.zeros((2, 3)), Category.PARAMS)
    m.alloc_elements(5, Category.PARAMS)
    assert m.current[Category.PARAMS] == 44


def test_combined_peak_tracks_simultaneous_live_bytes():
    m = MemoryMeter()
    a = m.track_alloc(10, Category.FEATURE_MAP)
    m.track_free(a)
    m.track_alloc(7, Category.SHARE_CACHE)
    rep = m.snapshot()
    assert rep.combined_peak([Category.FEATURE_MAP, Category.SHARE_CACHE]) == 10
    m.track_alloc(5, Category.FEATURE_MAP)
    assert m.snapshot().combined_peak([Category.FEATURE_MAP, Category.SHARE_CACHE]) == 12


def test_conservation_and_monotone_marks():
    rng = np.random.default_rng(0)
    m = MemoryMeter()
    live = []
    cats = list(Category)
    for _ in range(500):
        if live and rng.random() < 0.45:
            m.track_free(live.pop(int(rng.integers(len(live)))))
        else:
            live.append(m.track_alloc(int(rng.integers(0, 1000)), cats[int(rng.integers(len(cats)))]))
        assert all(v >= 0 for v in m.current.values())
        assert all(m.peak[c] >= m.current[c] for c in cats)
    rep = m.snapshot()
    for c in cats:
        alloc = sum(e.nbytes for e in rep.events if e.category == c and e.op == "alloc")
        freed = sum(e.nbytes for e in rep.events if e.category == c and e.op == "free")
        assert alloc - freed == rep.current[c]
    assert [e.ordinal for e in rep.events] == list(range(len(rep.events)))


def test_concurrent_updates_are_serialised():
    m = MemoryMeter()

    def work():
        for _ in range(2000):
            m.track_free(m.track_alloc(3, Category.OTHER))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert m.current[Category.OTHER] == 0 and len(m.events) == 16000
    assert m.peak[Category.OTHER] <= 12


def test_column_forward_replay_equals_omega_total(rng):
    spec = load_config("configs/vgg16_64.json").with_input(32)
    params = init_params(spec, 0)
    meter = MemoryMeter()
    column.forward_full(spec, params, rng.standard_normal((2,) + spec.input_dims), [0, 1], meter)
    assert meter.peak[Category.FEATURE_MAP] == omega_total(MemoryModel.from_spec(spec, 2, xi=0))


def _run_events(path, mode):
    spec = load_config("configs/tiny.json")
    params = init_params(spec, 4)
    x = np.random.default_rng(4).standard_normal((2,) + spec.input_dims)
    meter = MemoryMeter()
    engine.train_step_rowwise(spec, params, x, [0, 1], 0.1, build_plan(spec, mode, 2), meter)
    meter.export_events(path)
    return path.read_bytes()


def test_identical_runs_give_identical_event_logs(tmp_path):
    a = _run_events(tmp_path / "a.csv", "2ps")
    b = _run_events(tmp_path / "b.csv", "2ps")
    assert a == b
    assert a.splitlines()[0] == b"ordinal,op,bytes,category"
    assert b",alloc," in a and b",free," in a


@pytest.mark.parametrize("rows,batch", [(2, 1), (3, 2), (5, 2)])
def test_share_cache_peak_matches_closed_form(rows, batch):
    spec = load_config("configs/stack12.json")
    params = init_params(spec, 0)
    x = np.random.default_rng(0).standard_normal((batch,) + spec.input_dims)
    meter = MemoryMeter()
    engine.rowwise_gradients(spec, params, x, [0] * batch, build_plan(spec, "2ps", rows), meter)
    # rows cached for layer l are k - s of the stage consuming layer l, for l = 1..L-1
    expected = sum(batch * (rows - 1) * (spec.stages[l].k - spec.stages[l].s) * w * c
                   for l, (c, _, w) in enumerate(spec.shapes[1:-1], start=1)) * 8
    assert meter.peak[Category.SHARE_CACHE] == expected
    assert meter.current[Category.SHARE_CACHE] == 0
