import json

import numpy as np
import pytest

from neurogrid.nn import ParamFileError
from neurogrid.neural.models import IoSpec, bundle_from_dict, bundle_to_dict, load_bundle, make_model, save_bundle


@pytest.mark.parametrize("module", ["ode_e", "dae"])
@pytest.mark.parametrize("variant", ["regular", "autoencoder"])
def test_bundle_round_trip(tmp_path, module, variant):
    dae = module == "dae"
    io = IoSpec(dim_x=3, dim_z=4, dim_i=2 if dae else 0, dim_v=2 if dae else 0, n_d=5)
    m = make_model(module, variant, io, 7)
    path = tmp_path / "m.json"
    save_bundle(m, path)
    back = load_bundle(path)
    assert back.module_type == module and back.variant == variant and back.io == io
    assert all(np.array_equal(a, b) for a, b in zip(m.parameters(), back.parameters()))


def test_block_layouts():
    io = IoSpec(dim_x=1, dim_z=5, n_d=16)
    reg = make_model("ode_e", "regular", io)
    assert reg.blocks["ode"].spec.widths == (6, 16, 16, 16, 1)
    ae = make_model("ode_e", "autoencoder", io)
    assert set(ae.blocks) == {"enc_x", "dec_x", "enc_z", "ode"}
    assert ae.blocks["ode"].spec.widths == (32, 16, 16)
    dae = make_model("dae", "regular", IoSpec(dim_x=4, dim_z=4, dim_i=2, dim_v=2, n_d=8))
    assert dae.blocks["ode"].spec.widths[0] == 12
    assert dae.blocks["ae"].spec.widths == (10, 8, 8, 8, 2)
    assert dae.blocks["learner"].spec.widths == (8, 8, 8, 4)


def test_same_seed_same_weights():
    io = IoSpec(dim_x=2, dim_z=1, n_d=4)
    a, b = make_model("ode_e", "regular", io, 3), make_model("ode_e", "regular", io, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_bad_bundles(tmp_path):
    m = make_model("ode_e", "regular", IoSpec(dim_x=1, n_d=2))
    d = bundle_to_dict(m)
    with pytest.raises(ParamFileError):
        bundle_from_dict({**d, "format": "something-else"})
    broken = json.loads(json.dumps(d))
    broken["blocks"]["ode"]["layers"][0]["W"] = [[1.0]]
    with pytest.raises(ParamFileError):
        bundle_from_dict(broken)
    missing = json.loads(json.dumps(d))
    del missing["blocks"]
    with pytest.raises(ParamFileError):
        bundle_from_dict(missing)
    path = tmp_path / "m.json"
    path.write_text(json.dumps(d)[:40])
    with pytest.raises(ParamFileError):
        load_bundle(path)


def test_unknown_module():
    with pytest.raises(ValueError):
        make_model("sde", "regular", IoSpec(dim_x=1))
