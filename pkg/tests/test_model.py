import numpy as np
import pytest
from numpy.testing import assert_allclose

from fusionmoe import tensor as T
from fusionmoe.config import TrainConfig
from fusionmoe.gradcheck import max_relative_error
from fusionmoe.model import Model, ModelDims, UnimodalModel, build_model
from fusionmoe.tensor import Tape, Tensor, backward, no_grad

DIMS = ModelDims(text_dim=6, image_dim=5, clip_dim=4)


def small_cfg(**kw):
    base = dict(d=8, d_c=8, ff_ratio=2, gate_hidden=8, epochs=1)
    base.update(kw)
    return TrainConfig(**base)


def make_batch(rng, n=4):
    return {
        "text": rng.uniform(-1, 1, size=(n, 3, 6)),
        "image": rng.uniform(-1, 1, size=(n, 2, 5)),
        "clip_text": rng.uniform(0.2, 1.0, size=(n, 4)),
        "clip_image": rng.uniform(0.2, 1.0, size=(n, 4)),
        "y": rng.integers(0, 2, size=n),
        "truth": rng.integers(0, 4, size=n),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(33)


@pytest.fixture
def model(rng):
    return Model(DIMS, small_cfg(), rng)


class TestRefine:
    def test_single_token_sequences(self, model, rng):
        batch = {
            "text": rng.uniform(-1, 1, size=(2, 1, 6)),
            "image": rng.uniform(-1, 1, size=(2, 1, 5)),
        }
        with no_grad():
            e_t, e_i, e_m = model.refine(Tensor(batch["text"]),
                                         Tensor(batch["image"]))
        for e in (e_t, e_i, e_m):
            assert e.shape == (2, 8)
            assert np.isfinite(e.data).all()

    def test_multimodal_branch_reads_both_modalities(self, model, rng):
        text = rng.uniform(-1, 1, size=(1, 3, 6))
        image = rng.uniform(-1, 1, size=(1, 2, 5))
        other_image = image + 0.5
        with no_grad():
            _, _, e_m = model.refine(Tensor(text), Tensor(image))
            _, _, e_m2 = model.refine(Tensor(text), Tensor(other_image))
        assert np.abs(e_m.data - e_m2.data).max() > 1e-8

    def test_gradient_through_branches(self, rng):
        model = Model(DIMS, small_cfg(ff_ratio=1), rng)
        x_t = Tensor(rng.uniform(-1, 1, size=(1, 2, 6)), requires_grad=True)
        x_i = Tensor(rng.uniform(-1, 1, size=(1, 2, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 8)))
        params = (model.proj_text.parameters() + model.refine_text.parameters())
        def f():
            e_t, e_i, e_m = model.refine(x_t, x_i)
            return T.tsum(e_t * w) + T.tsum(e_i * w) + T.tsum(e_m * w)
        err = max_relative_error(f, [x_t, x_i, *params])
        assert err <= 1e-4


class TestUnimodalHeads:
    def test_zero_head_weights_give_uniform(self, model, rng):
        for head in (model.head_text, model.head_image):
            for p in head.parameters():
                p.data = np.zeros_like(p.data)
        out = model.forward_loss(make_batch(rng))
        assert_allclose(out.p_text, 0.5, atol=1e-15)
        assert_allclose(out.p_image, 0.5, atol=1e-15)
        assert_allclose(out.loss_uni.item(), np.log(2.0), rtol=1e-12)

    def test_loss_uni_recomposes(self, model, rng):
        batch = make_batch(rng)
        out = model.forward_loss(batch)
        with no_grad():
            e_t, e_i, _ = model.refine(
                Tensor(batch["text"]), Tensor(batch["image"]))
            lt, li = model.unimodal_predict(e_t, e_i)
            y = batch["y"]
            expected = 0.5 * (T.cross_entropy_logits(lt, y).item()
                              + T.cross_entropy_logits(li, y).item())
        assert_allclose(out.loss_uni.item(), expected, atol=1e-10)


class TestFuseAndClassify:
    def test_one_hot_dispatch_scales_by_probability(self, model, rng):
        batch = make_batch(rng, n=3)
        with no_grad():
            e_t, e_i, e_m = model.refine(
                Tensor(batch["text"]), Tensor(batch["image"]))
            dispatch = np.array([2, 2, 2])
            probs = np.zeros((3, 4))
            probs[:, 2] = 1.0
            logits = model.fuse_and_classify(e_t, e_i, e_m, dispatch,
                                             Tensor(probs))
            tokens = T.stack([model.norm_text(e_t), e_m,
                              model.norm_image(e_i)], axis=-2)
            fused, _ = model.fusion_experts[2](tokens)
            expected = model.head_final(fused)
        assert_allclose(logits.data, expected.data, rtol=1e-10)

    def test_inactive_experts_get_no_gradient(self, model, rng):
        batch = make_batch(rng, n=4)
        with Tape() as tape:
            out = model.forward_loss(batch)
            backward(out.loss_total, tape)
        used = set(out.dispatch_idx.tolist())
        for k, expert in enumerate(model.fusion_experts):
            grads = [p.grad for p in expert.parameters()]
            if k in used:
                assert any(g is not None and np.abs(g).max() > 0 for g in grads)
            else:
                assert all(g is None for g in grads)
        model.zero_grad()

    def test_dispatch_index_out_of_range(self, model, rng):
        batch = make_batch(rng, n=2)
        with no_grad():
            e_t, e_i, e_m = model.refine(
                Tensor(batch["text"]), Tensor(batch["image"]))
        with pytest.raises(IndexError):
            model.fuse_and_classify(e_t, e_i, e_m, np.array([0, 4]),
                                    Tensor(np.full((2, 4), 0.25)))

    def test_gradient_through_active_path(self, rng):
        model = Model(DIMS, small_cfg(ff_ratio=1), rng)
        batch = make_batch(rng, n=2)
        with no_grad():
            probs = model.forward_loss(batch).dispatch_probs.data
        margin = np.sort(probs, axis=-1)
        assert (margin[:, -1] - margin[:, -2]).min() > 1e-3
        pinned = np.array([1, 2])
        params = (model.fusion_experts[int(probs[0].argmax())].parameters()
                  + model.head_final.parameters()
                  + model.norm_text.parameters())
        def f():
            return model.forward_loss(batch, y_int_override=pinned).loss_task
        err = max_relative_error(f, params)
        assert err <= 1e-4


class TestForwardLoss:
    def test_total_recomposes(self, model, rng):
        out = model.forward_loss(make_batch(rng))
        cfg = model.cfg
        expected = (out.loss_task.item() + cfg.alpha * out.loss_uni.item()
                    + cfg.beta * out.loss_int.item())
        assert_allclose(out.loss_total.item(), expected, atol=1e-10)

    def test_alpha_beta_zero_reduces_to_task(self, rng):
        model = Model(DIMS, small_cfg(alpha=0.0, beta=0.0), rng)
        out = model.forward_loss(make_batch(rng))
        assert_allclose(out.loss_total.item(), out.loss_task.item(), atol=1e-15)

    def test_all_zero_parameters_give_uniform_losses(self, rng):
        model = Model(DIMS, small_cfg(eta=0.0, gamma=0.0), rng)
        for p in model.parameters():
            p.data = np.zeros_like(p.data)
        out = model.forward_loss(make_batch(rng))
        assert_allclose(out.loss_task.item(), np.log(2.0), rtol=1e-12)
        assert_allclose(out.loss_uni.item(), np.log(2.0), rtol=1e-12)
        # uniform dispatch against any integer target costs ln 4
        assert_allclose(out.loss_int.item(), np.log(4.0), rtol=1e-12)

    def test_two_passes_agree_bitwise(self, model, rng):
        batch = make_batch(rng)
        with no_grad():
            a = model.forward_loss(batch)
            b = model.forward_loss(batch)
        assert a.loss_total.item() == b.loss_total.item()
        assert (a.logits_final.data == b.logits_final.data).all()
        assert (a.dispatch_idx == b.dispatch_idx).all()

    def test_clip_scaling_leaves_targets_unchanged(self, model, rng):
        batch = make_batch(rng)
        scaled = dict(batch)
        scaled["clip_text"] = batch["clip_text"] * 37.5
        with no_grad():
            out = model.forward_loss(batch)
            out_scaled = model.forward_loss(scaled)
        assert_allclose(out_scaled.rho, out.rho, rtol=1e-12)
        assert (out_scaled.y_int == out.y_int).all()

    def test_y_int_override_pins_targets(self, model, rng):
        batch = make_batch(rng)
        pinned = np.array([3, 3, 3, 3])
        out = model.forward_loss(batch, y_int_override=pinned)
        assert (out.y_int == pinned).all()

    def test_head_isolation_under_alpha(self, rng):
        # with routing targets pinned, alpha must not change the gradients of
        # the final prediction path (norms, fusion experts, final head)
        batch = make_batch(rng)
        pinned = np.array([0, 1, 2, 3])

        def final_path_grads(alpha):
            r = np.random.default_rng(55)
            model = Model(DIMS, small_cfg(alpha=alpha), r)
            with Tape() as tape:
                out = model.forward_loss(batch, y_int_override=pinned)
                backward(out.loss_total, tape)
            names = []
            grads = []
            for name, p in model.named_parameters():
                if name.startswith(("norm_", "fusion_experts.", "head_final.")):
                    names.append(name)
                    grads.append(None if p.grad is None else p.grad.copy())
            return names, grads

        names_a, grads_a = final_path_grads(0.5)
        names_b, grads_b = final_path_grads(0.0)
        assert names_a == names_b
        for ga, gb in zip(grads_a, grads_b):
            if ga is None or gb is None:
                assert ga is None and gb is None
            else:
                assert_allclose(ga, gb, atol=1e-14)

    def test_dispatch_targets_leak_no_gradient_into_heads(self, model, rng):
        # y_int is built from detached head outputs; the interaction loss
        # must therefore not reach the unimodal heads at all
        batch = make_batch(rng)
        with Tape() as tape:
            out = model.forward_loss(batch)
            backward(out.loss_int, tape)
        for name, p in model.named_parameters():
            if name.startswith(("head_text.", "head_image.")):
                assert p.grad is None, name
        model.zero_grad()

    def test_detach_unimodal_blocks_refinement_gradients(self, rng):
        batch = make_batch(rng)
        model = Model(DIMS, small_cfg(detach_unimodal=True, beta=0.0), rng)
        # with beta=0 and detached heads, only the task loss reaches the
        # refinement branches; compare against alpha=0 to isolate the path
        with Tape() as tape:
            out = model.forward_loss(batch)
            backward(out.loss_uni * model.cfg.alpha, tape)
        for name, p in model.named_parameters():
            if name.startswith("refine_text."):
                assert p.grad is None
        model.zero_grad()


class TestUnimodalVariants:
    def test_build_model_dispatch(self, rng):
        assert isinstance(build_model(DIMS, small_cfg(), rng), Model)
        assert isinstance(build_model(DIMS, small_cfg(mode="text_only"), rng),
                          UnimodalModel)

    def test_text_only_ignores_images(self, rng):
        model = UnimodalModel(DIMS, small_cfg(mode="text_only"), rng)
        batch = make_batch(rng)
        altered = dict(batch)
        altered["image"] = batch["image"] + 10.0
        with no_grad():
            a = model.forward_loss(batch)
            b = model.forward_loss(altered)
        assert (a.logits_final.data == b.logits_final.data).all()

    def test_unimodal_partition_is_trivial(self, rng):
        model = UnimodalModel(DIMS, small_cfg(mode="image_only"), rng)
        assert model.gate_parameters() == []
        assert len(model.main_parameters()) == len(model.parameters())
