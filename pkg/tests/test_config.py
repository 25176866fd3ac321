import json

import numpy as np
import pytest

from moserflow.config import (SCHEMA, build_dataset, build_model, flatten, parse_config, resolve,
                              train_config)
from moserflow.errors import InvalidValue, IoError, UnknownKey


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return path


class TestParse:
    def test_minimal_config_gets_defaults(self, tmp_path):
        path = write(tmp_path, {"manifold": "flat_torus", "hidden": [256, 256, 256],
                                "posenc_k": 1, "lambda_minus": 2})
        cfg = parse_config(path)
        assert cfg["lambda_plus"] == 0.0
        assert cfg["softplus_beta"] == 100.0
        assert cfg["lr"] == 1e-4
        assert cfg["lambda_minus"] == 2
        np.testing.assert_allclose(cfg["epsilon"], 1e-5 / 4)

    def test_lambda_sum(self, tmp_path):
        with pytest.raises(InvalidValue, match="lambda_minus \\+ lambda_plus"):
            parse_config(write(tmp_path, {"lambda_minus": 0.5, "lambda_plus": 0}))

    def test_unknown_key_is_named(self, tmp_path):
        with pytest.raises(UnknownKey, match="momentum"):
            parse_config(write(tmp_path, {"momentum": 0.9}))

    def test_invalid_value_names_key_and_constraint(self):
        with pytest.raises(InvalidValue, match="hidden must be a nonempty list"):
            resolve({"hidden": []})
        with pytest.raises(InvalidValue, match="ode.steps"):
            resolve({"ode": {"steps": 4}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            parse_config(tmp_path / "nope.json")

    def test_not_json(self, tmp_path):
        with pytest.raises(InvalidValue):
            parse_config(write(tmp_path, "{manifold: sphere"))

    def test_nested_and_dotted_agree(self):
        a = resolve({"ode": {"steps": 64, "method": "dopri5"}})
        b = resolve({"ode.steps": 64, "ode.method": "dopri5"})
        assert a.values == b.values

    def test_overrides_win(self, tmp_path):
        cfg = parse_config(write(tmp_path, {"lr": 0.01}), {"lr": 0.5})
        assert cfg["lr"] == 0.5

    def test_flatten_keeps_schema_dicts_whole(self):
        assert flatten({"a": {"b": 1}, "hidden": [1]}) == {"a.b": 1, "hidden": [1]}


class TestCrossKey:
    def test_posenc_defaults(self):
        assert resolve({})["posenc_k"] == 1
        assert resolve({"manifold": "sphere"})["posenc_k"] == 0

    def test_posenc_rules(self):
        with pytest.raises(InvalidValue):
            resolve({"posenc_k": 0})
        with pytest.raises(InvalidValue):
            resolve({"manifold": "sphere", "posenc_k": 2})

    def test_epsilon_bound(self):
        with pytest.raises(InvalidValue, match="epsilon"):
            resolve({"manifold": "sphere", "epsilon": 0.1})

    def test_unnormalized_default(self):
        assert resolve({"manifold": "implicit_torus"})["unnormalized"] is True
        assert resolve({"manifold": "sphere"})["unnormalized"] is False

    def test_thick_torus_rejected(self):
        with pytest.raises(InvalidValue):
            resolve({"manifold": "implicit_torus", "implicit_torus": {"R": 1.0, "r": 0.9}})

    def test_resolved_echo_is_complete(self, tmp_path):
        cfg = resolve({"manifold": "sphere"})
        cfg.write_resolved(tmp_path / "config.resolved")
        echoed = json.loads((tmp_path / "config.resolved").read_text())
        assert set(echoed) == set(SCHEMA)
        assert None not in (echoed["epsilon"], echoed["posenc_k"], echoed["unnormalized"],
                            echoed["threads"])
        # resolving the echo again is a fixed point
        assert resolve(echoed).values == cfg.values


class TestBuilders:
    def test_model_and_train_config(self):
        cfg = resolve({"manifold": "sphere", "hidden": [4, 4], "lambda_minus": 3,
                       "lr_schedule": "cosine"})
        m = build_model(cfg)
        assert tuple(m.net.spec.hidden_widths) == (4, 4) and m.lambda_minus == 3
        tc = train_config(cfg)
        assert tc.lr_schedule == "cosine" and tc.lr_at(0) == cfg["lr"]

    @pytest.mark.parametrize("doc,kind,n", [
        ({"data.count": 100}, "flat_torus", 100),
        ({"manifold": "sphere", "data.source": "vmf", "data.count": 50}, "sphere", 50),
        ({"manifold": "implicit_torus", "data.source": "torus_harmonic", "data.count": 30},
         "implicit_torus", 30),
    ])
    def test_datasets(self, doc, kind, n):
        ds = build_dataset(resolve(doc))
        assert ds.geometry.kind == kind and len(ds) == n
        assert len(ds.test_idx) == round(0.2 * n)

    def test_source_manifold_mismatch(self):
        with pytest.raises(InvalidValue):
            build_dataset(resolve({"data.source": "vmf"}))
        with pytest.raises(InvalidValue):
            build_dataset(resolve({"data.source": "image"}))
