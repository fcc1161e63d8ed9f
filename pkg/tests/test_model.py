import numpy as np
import pytest

from galnet import autodiff as ad
from galnet.errors import ConfigError, DimensionError, ParseError
from galnet.model import (
    BlockSpec,
    ModelConfig,
    build_model,
    load_checkpoint,
    predict,
    read_checkpoint,
    save_checkpoint,
)
from galnet.training import attribute_ce_loss

from conftest import small_model_config


def batch(rng, b=4, shape=(8, 8, 1)):
    return rng.standard_normal((b, *shape))


class TestBuild:
    def test_same_seed_bitwise(self):
        _, r1 = build_model(small_model_config(), seed=7)
        _, r2 = build_model(small_model_config(), seed=7)
        assert [n for n, _, _ in r1] == [n for n, _, _ in r2]
        for (_, a, _), (_, b, _) in zip(r1, r2):
            assert a.data.tobytes() == b.data.tobytes()

    def test_different_seed_differs(self):
        _, r1 = build_model(small_model_config(), seed=1)
        _, r2 = build_model(small_model_config(), seed=2)
        assert r1.snapshot()["head_f.0.weight"].tobytes() != r2.snapshot()["head_f.0.weight"].tobytes()

    def test_baseline_has_no_cln(self):
        _, reg = build_model(small_model_config("baseline"))
        assert reg.count("CLN") == 0 and reg.count("HEAD_C") == 0
        assert reg.count("FLN") > 0 and reg.count("HEAD_F") > 0

    def test_parameter_count_closed_form(self):
        cfg = ModelConfig(
            num_attributes=5,
            input_shape=(16, 16, 1),
            backbone=(BlockSpec(8), BlockSpec(16)),
            branch_channels=4,
            projection_channels=2,
            pse_hidden=4,
            variant="gal_j",
        )
        _, reg = build_model(cfg)
        backbone = (3 * 3 * 1 * 8 + 2 * 8) + (3 * 3 * 8 * 16 + 2 * 16)  # convs have no bias
        fh = fw = 16 // 2 // 2
        branch = 16 * 4 + 2 * 4 + (3 * 3 * 1 * 4 + 4) + (3 * 3 * 4 * 1 + 1)
        head_f = fh * fw * 4 * 2 + 2
        proj = 4 * 2 + 2
        head_c = fh * fw * 2 * 2 + 2
        assert reg.count("FLN") == backbone + 5 * branch
        assert reg.count("HEAD_F") == 5 * head_f
        assert reg.count("CLN") == 5 * proj
        assert reg.count("HEAD_C") == 5 * head_c
        assert reg.count() == 3047

    def test_branches_share_structure_not_values(self):
        _, reg = build_model(small_model_config(m=3))
        snap = reg.snapshot()
        assert snap["branch.0.conv.kernel"].shape == snap["branch.2.conv.kernel"].shape
        assert not np.array_equal(snap["branch.0.conv.kernel"], snap["branch.2.conv.kernel"])

    @pytest.mark.parametrize(
        "kw,field",
        [
            (dict(num_attributes=1), "num_attributes"),
            (dict(branch_channels=0), "branch_channels"),
            (dict(variant="gal_p"), "prior_groups"),
            (dict(variant="gal_p", prior_groups=[("a", [0, 1])]), "prior_groups"),
            (dict(variant="gal-x"), "variant"),
            (dict(input_shape=(1, 1, 1)), "backbone"),
        ],
    )
    def test_config_errors_name_field(self, kw, field):
        base = dict(num_attributes=3, input_shape=(8, 8, 1), backbone=(BlockSpec(4),))
        base.update(kw)
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**base)

    def test_registry_tags(self):
        _, reg = build_model(small_model_config())
        for name, _, tag in reg:
            prefix = name.split(".")[0]
            assert tag == {"backbone": "FLN", "branch": "FLN", "head_f": "HEAD_F", "proj": "CLN", "head_c": "HEAD_C"}[prefix]


class TestForward:
    def test_baseline_has_no_logits_c(self, rng):
        model, _ = build_model(small_model_config("baseline"))
        out = model.forward(batch(rng))
        assert out.logits_c is None and out.attention is None
        assert out.logits_f.shape == (4, 3, 2)

    def test_gal_outputs(self, rng):
        model, _ = build_model(small_model_config("gal_j"))
        out = model.forward(batch(rng))
        assert out.logits_c.shape == (4, 3, 2) and out.attention.shape == (4, 3, 3)
        assert len(out.branch_features) == 3

    def test_zero_input_zero_heads(self, rng):
        model, reg = build_model(small_model_config("gal_j"))
        for name, t, tag in reg:
            if tag in ("HEAD_F", "HEAD_C"):
                t.data = np.zeros_like(t.data)
        out = model.forward(np.zeros((2, 8, 8, 1)))
        for logits in (out.logits_f, out.logits_c):
            assert np.all(logits.data == 0)
            p = ad.softmax(logits).data
            assert np.all(p == 0.5)

    def test_logits_f_unaffected_by_cln(self, rng):
        x = batch(rng)
        base, _ = build_model(small_model_config("baseline"), seed=11)
        gal, _ = build_model(small_model_config("gal_j"), seed=11)
        for mode in ("train", "infer"):
            assert base.forward(x, mode).logits_f.data.tobytes() == gal.forward(x, mode).logits_f.data.tobytes()

    def test_cln_perturbation_leaves_logits_f(self, rng):
        x = batch(rng)
        model, reg = build_model(small_model_config("gal_j"))
        before = model.forward(x, "infer").logits_f.data.tobytes()
        for _, t in reg.tagged("CLN", "HEAD_C"):
            t.data = t.data + rng.standard_normal(t.shape)
        assert model.forward(x, "infer").logits_f.data.tobytes() == before

    def test_branch_independence(self, rng):
        x = batch(rng)
        model, reg = build_model(small_model_config("gal_j", m=4))
        before = model.forward(x, "infer").logits_f.data.copy()
        for name, t, _ in reg:
            if name.startswith("branch.2.") or name.startswith("head_f.2."):
                t.data = np.zeros_like(t.data)
        after = model.forward(x, "infer").logits_f.data
        assert not np.array_equal(after[:, 2], before[:, 2])
        for j in (0, 1, 3):
            assert after[:, j].tobytes() == before[:, j].tobytes()

    def test_infer_deterministic(self, rng):
        x = batch(rng)
        model, _ = build_model(small_model_config("gal_j"))
        a = model.forward(x, "infer")
        b = model.forward(x, "infer")
        assert a.logits_c.data.tobytes() == b.logits_c.data.tobytes()

    def test_bad_batch_shape(self, rng):
        model, _ = build_model(small_model_config())
        with pytest.raises(DimensionError):
            model.forward(rng.standard_normal((2, 9, 8, 1)))

    def test_registry_complete_under_both_losses(self, rng):
        model, reg = build_model(small_model_config("gal_j"))
        labels = rng.integers(0, 2, (4, 3))
        out = model.forward(batch(rng))
        total = ad.add(attribute_ce_loss(out.logits_f, labels)[0], attribute_ce_loss(out.logits_c, labels)[0])
        total.backward()
        missing = [n for n, t, _ in reg if t.grad is None]
        assert missing == []


class TestPredict:
    def test_argmax_and_tie(self, rng):
        model, reg = build_model(small_model_config("baseline", m=2))
        for _, t in reg.tagged("HEAD_F"):
            t.data = np.zeros_like(t.data)
        reg.entries["head_f.0.bias"][0].data = np.array([2.0, -1.0])
        labels = predict(model, batch(rng, 3))
        assert np.all(labels[:, 0] == 0)  # logits [2, -1]
        assert np.all(labels[:, 1] == 0)  # tie

    def test_uses_post_gal_heads_unless_forced(self, rng):
        model, reg = build_model(small_model_config("gal_j", m=2))
        for _, t in reg.tagged("HEAD_F", "HEAD_C"):
            t.data = np.zeros_like(t.data)
        reg.entries["head_c.1.bias"][0].data = np.array([0.0, 1.0])
        x = batch(rng, 2)
        assert np.all(model.predict(x)[:, 1] == 1)
        assert np.all(model.predict(x, use_f=True)[:, 1] == 0)

    def test_batch_equals_loop(self, rng):
        model, _ = build_model(small_model_config("gal_j"))
        x = batch(rng, 6)
        together = model.predict(x)
        single = np.concatenate([model.predict(x[i : i + 1]) for i in range(6)])
        assert np.array_equal(together, single)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        model, reg = build_model(small_model_config("gal_j"), seed=5)
        model.forward(batch(rng))  # move running statistics off their defaults
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, extra={"step": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"step": 3}
        assert loaded.config == model.config
        for (n1, a, t1), (n2, b, t2) in zip(reg, loaded.registry):
            assert (n1, t1) == (n2, t2) and a.data.tobytes() == b.data.tobytes()
        for k, bn in model.batchnorms.items():
            assert bn.running_mean.tobytes() == loaded.batchnorms[k].running_mean.tobytes()
            assert bn.running_var.tobytes() == loaded.batchnorms[k].running_var.tobytes()
        save_checkpoint(tmp_path / "again.ckpt", loaded, extra={"step": 3})
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_header_self_describing(self, tmp_path):
        model, _ = build_model(small_model_config("gal_p", prior_groups=[("a", [0, 1]), ("b", [2])]))
        save_checkpoint(tmp_path / "m.ckpt", model)
        header, arrays = read_checkpoint(tmp_path / "m.ckpt")
        assert header["version"] == 1
        assert header["config"]["variant"] == "gal_p"
        kinds = {e["kind"] for e in header["entries"]}
        assert kinds == {"param", "buffer"}
        assert all(set(e) >= {"name", "tag", "shape", "offset"} for e in header["entries"])
        assert "branch.0.bn.running_var" in arrays

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope" * 10)
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "x")
