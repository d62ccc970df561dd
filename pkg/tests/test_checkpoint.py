import json
import struct

import numpy as np
import pytest

from relmap import checkpoint
from relmap.errors import FormatError
from relmap.network import MaskedNetwork
from relmap.relevance import prune
from relmap.supervised import TaskOptimizer, TrainConfig, train_step


def trained_net():
    r = np.random.default_rng(0)
    net = MaskedNetwork((12, 8, 8, 4), seed=3)
    cfg = TrainConfig()
    for task in (0, 1):
        net.add_task(task)
        opt = TaskOptimizer(net, task, cfg)
        for _ in range(10):
            train_step(net, opt, r.normal(size=(16, 12)), r.integers(0, 4, size=16), cfg)
        if task == 0:
            net.maps[0] = {k: prune(m, 0.05) for k, m in net.maps[0].items()}
            net.complete_task(0)
    return net, opt


def test_round_trip_is_bit_exact(tmp_path):
    net, opt = trained_net()
    scalars, arrays = checkpoint.optimizer_arrays("weights", opt.weights.state_dict())
    p = checkpoint.save(tmp_path / "a.ckpt", net, meta={"opt": scalars, "note": "x"}, arrays=arrays)
    back, meta, extra = checkpoint.load(p)
    assert meta["note"] == "x"
    assert back.task_order == net.task_order and back.completed == net.completed
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()
        assert np.array_equal(back.frozen[k].mask, net.frozen[k].mask)
        assert np.array_equal(back.masks[0][k], net.masks[0][k])
        assert back.maps[1][k].raw.tobytes() == net.maps[1][k].raw.tobytes()
    x = np.random.default_rng(9).normal(size=(20, 12))
    for t in (0, 1):
        assert back.eval_logits(x, t).tobytes() == net.eval_logits(x, t).tobytes()
    state = checkpoint.optimizer_state("weights", meta["opt"], extra)
    for k, m in opt.weights.m.items():
        assert state["m"][k].tobytes() == m.tobytes()


def test_saving_twice_gives_identical_bytes(tmp_path):
    net, _ = trained_net()
    a = checkpoint.save(tmp_path / "a", net).read_bytes()
    b = checkpoint.save(tmp_path / "b", net).read_bytes()
    assert a == b
    assert not list(tmp_path.glob("*.tmp"))


def test_masks_are_bit_packed(tmp_path):
    net, _ = trained_net()
    raw = checkpoint.save(tmp_path / "c", net).read_bytes()
    _, _, hlen = struct.unpack_from("<8sIQ", raw)
    header = json.loads(raw[20:20 + hlen])
    packed = [e for e in header["arrays"] if e["name"].startswith("mask/")]
    assert packed and all(e["packed"] and e["nbytes"] == -(-np.prod(e["shape"]) // 8) for e in packed)


@pytest.mark.parametrize("mutate,message", [
    (lambda b: b[:10], "too short"),
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 99) + b[12:], "version 99"),
    (lambda b: b[:-5], "ends early"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:20] + b"#" + b[21:], "corrupt header"),
    (lambda b: b[:12] + struct.pack("<Q", 10 ** 9) + b[20:], "truncated"),
])
def test_damaged_files_raise_format_error(tmp_path, mutate, message):
    net, _ = trained_net()
    p = checkpoint.save(tmp_path / "d", net)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError, match=message):
        checkpoint.load(p)
