import struct

import numpy as np
import pytest

from mcmil.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from mcmil.nn import init_params


@pytest.mark.parametrize("n_cameras,split", [(0, 1), (2, 1), (3, 2)])
def test_round_trip_is_exact(tmp_path, n_cameras, split):
    p = init_params(7, np.random.default_rng(0), (9, 4), n_cameras=n_cameras, split=split)
    path = tmp_path / "m.mcml"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert (q.layer_dims, q.n_cameras, q.split) == (p.layer_dims, p.n_cameras, p.split)
    for a, b in zip(p.tensors(), q.tensors()):
        np.testing.assert_array_equal(a, b)


def test_header_layout():
    p = init_params(7, np.random.default_rng(0), (9, 4), n_cameras=2, split=1)
    blob = dumps(p)
    assert struct.unpack_from("<4sIII4I", blob) == (b"MCML", 1, 2, 1, 7, 9, 4, 1)
    w0 = np.frombuffer(blob, "<f4", count=63, offset=32).reshape(9, 7)
    np.testing.assert_array_equal(w0, p.weights[0])
    assert len(blob) == 32 + 4 * sum(t.size for t in p.tensors())


def test_corrupt_inputs_rejected():
    blob = dumps(init_params(3, np.random.default_rng(0), (4, 2)))
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        loads(blob[:-1])
    with pytest.raises(CheckpointError):
        loads(blob[:10])
    bad_version = blob[:4] + struct.pack("<I", 2) + blob[8:]
    with pytest.raises(CheckpointError):
        loads(bad_version)
