import numpy as np
import pytest

from conftest import make_corpus
from teqkit.errors import ContractError, DataError, DivergenceError
from teqkit.model import build_model, find_fusion_sites, forward, lm_loss
from teqkit.quant import QuantSpec, fake_quant_array
from teqkit.tensor import Tensor
from teqkit import trainer
from teqkit.trainer import (
    Adam,
    TrainConfig,
    calibration_windows,
    final_loss,
    init_scales,
    select_init,
    train,
    write_trace,
)


@pytest.fixture(scope="module")
def calib_tokens():
    raw = np.frombuffer(make_corpus(20_000, seed=5), dtype=np.uint8).astype(np.int64)
    return raw % 67  # fold bytes into the tiny model's vocabulary


def ones_scales(model):
    return init_scales(find_fusion_sites(model), "ones")


class TestConfig:
    def test_steps_lower_bound(self):
        with pytest.raises(ContractError):
            TrainConfig(steps=0)

    def test_lr_positive(self):
        with pytest.raises(ContractError):
            TrainConfig(lr=0.0)

    def test_lr_schedule_hits_zero(self):
        cfg = TrainConfig(steps=100, lr=1e-3)
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(100) == 0.0
        assert cfg.lr_at(50) == pytest.approx(5e-4)

    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.betas == (0.9, 0.9)
        assert cfg.weight_decay == 0.0
        assert cfg.steps == 1000
        assert cfg.batch_size == 1


class TestInitScales:
    def test_ones(self, tiny_model):
        scales = ones_scales(tiny_model)
        assert all(np.all(v == 1.0) for v in scales.values())
        assert {len(v) for v in scales.values()} == {32}

    def test_inv_sqrt_cin(self, desk_config):
        model = build_model(desk_config, seed=0)
        scales = init_scales(find_fusion_sites(model), "inv_sqrt_cin")
        assert all(np.allclose(v, 0.125) for v in scales.values())

    def test_ones_is_identity_transform(self, tiny_model, rng):
        toks = rng.integers(0, tiny_model.config.vocab_size, (1, 12))
        base = forward(tiny_model, toks).data
        scales = {k: Tensor(v) for k, v in ones_scales(tiny_model).items()}
        got = forward(tiny_model, toks, site_scales=scales).data
        assert np.array_equal(got, base)

    def test_unknown_strategy(self, tiny_model):
        with pytest.raises(ContractError):
            init_scales(find_fusion_sites(tiny_model), "zeros")


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step(1e-3)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_first_step_closed_form(self):
        g = np.array([0.25, -3.0, 1e-4], dtype=np.float32)
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, betas=(0.9, 0.9), eps=1e-8)
        p.grad = g.copy()
        lr = 1e-3
        opt.step(lr)
        # bias-corrected m=g, v=g^2 -> update = -lr * g / (|g| + eps)
        expect = -lr * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expect, rtol=1e-5)
        assert np.allclose(np.abs(p.data), lr, rtol=1e-3)  # ~ -lr*sign(g)

    def test_step_counter(self):
        p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.ones(1, dtype=np.float32)
        opt.step(1e-3)
        opt.step(1e-3)
        assert opt.t == 2


class TestTransformedForward:
    def test_identity_scales_no_quant_bitwise(self, tiny_model, rng, calib_tokens):
        toks = calib_tokens[:17]
        inputs, targets = toks[None, :16], toks[None, 1:17]
        base = lm_loss(tiny_model, inputs, targets).item()
        scales = {k: Tensor(v) for k, v in ones_scales(tiny_model).items()}
        got = trainer.transformed_fake_quant_forward(
            tiny_model, scales, inputs, targets, None
        ).item()
        assert got == base

    def test_identity_scales_equals_rtn(self, tiny_model, calib_tokens):
        spec = QuantSpec(n_bits=4)
        toks = calib_tokens[:17]
        inputs, targets = toks[None, :16], toks[None, 1:17]
        rtn = lm_loss(tiny_model, inputs, targets, quant=spec).item()
        scales = {k: Tensor(v) for k, v in ones_scales(tiny_model).items()}
        got = trainer.transformed_fake_quant_forward(
            tiny_model, scales, inputs, targets, spec
        ).item()
        assert got == rtn

    def test_fp32_loss_invariant_under_scales(self, tiny_model, rng, calib_tokens):
        toks = calib_tokens[:17]
        inputs, targets = toks[None, :16], toks[None, 1:17]
        base = lm_loss(tiny_model, inputs, targets).item()
        for _ in range(5):
            scales = {
                s.site_id: Tensor(rng.uniform(0.5, 2, s.channel_count).astype(np.float32))
                for s in find_fusion_sites(tiny_model)
            }
            got = trainer.transformed_fake_quant_forward(
                tiny_model, scales, inputs, targets, None
            ).item()
            assert abs(got - base) / abs(base) <= 1e-4

    def test_scale_gradient_vanishes_without_quant(self, tiny_model, calib_tokens):
        # With quantization bypassed the weight-scale and activation-divide
        # paths cancel exactly, so the scale gradient must be ~0.
        toks = calib_tokens[:13]
        inputs, targets = toks[None, :12], toks[None, 1:13]
        scales = {k: Tensor(v) for k, v in ones_scales(tiny_model).items()}
        s = Tensor(np.ones(32, dtype=np.float32), requires_grad=True)
        sc = dict(scales)
        sc["block0.ln1"] = s
        loss = trainer.transformed_fake_quant_forward(tiny_model, sc, inputs, targets, None)
        loss.backward()
        assert np.abs(s.grad).max() <= 1e-6

    def test_scale_gradient_through_ste(self, tiny_model, calib_tokens):
        # Finite differences through the STE forward with rounding frozen at
        # the evaluation point; compare only coordinates with |grad| > 1e-4.
        spec = QuantSpec(n_bits=4)
        toks = calib_tokens[:13]
        inputs, targets = toks[None, :12], toks[None, 1:13]
        site = "block0.ln1"
        scales = {k: Tensor(v) for k, v in ones_scales(tiny_model).items()}

        # autodiff gradient through the real fake-quant forward
        s_ad = Tensor(np.ones(32, dtype=np.float32), requires_grad=True)
        sc = dict(scales)
        sc[site] = s_ad
        loss = trainer.transformed_fake_quant_forward(tiny_model, sc, inputs, targets, spec)
        loss.backward()
        ad = s_ad.grad.copy()

        # frozen surrogate: scaled weight plus the rounding offset captured
        # at s = ones; smooth in s, same value and same STE derivative at s0
        offsets = {}
        for st in find_fusion_sites(tiny_model):
            for name in st.consumers:
                w = tiny_model.params[f"{name}.weight"]
                offsets[name] = fake_quant_array(w, spec) - w
        for name in tiny_model.linear_names():
            if name not in offsets:
                w = tiny_model.params[f"{name}.weight"]
                offsets[name] = fake_quant_array(w, spec) - w

        def frozen_quant(w, name):
            return w.add_const(offsets[name])

        def f(s):
            sc2 = dict(scales)
            sc2[site] = s
            return trainer.transformed_fake_quant_forward(
                tiny_model, sc2, inputs, targets, frozen_quant
            )

        s_fd = Tensor(np.ones(32, dtype=np.float32), requires_grad=True)
        s_fd.grad = None
        loss2 = f(s_fd)
        loss2.backward()
        assert np.allclose(s_fd.grad, ad, rtol=1e-4, atol=1e-6)

        # Directional finite difference along the gradient; a large-enough
        # step keeps the loss delta well above float32 forward noise.
        assert np.linalg.norm(ad) > 1e-5
        u = (ad / np.linalg.norm(ad)).astype(np.float32)
        h = 1e-2
        fp = f(Tensor((np.ones(32) + h * u).astype(np.float32)))._hp
        fm = f(Tensor((np.ones(32) - h * u).astype(np.float32)))._hp
        fd = (fp - fm) / (2 * h)
        exact = float(ad @ u)
        assert abs(fd - exact) / abs(exact) <= 1e-2


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(steps=8, seq_len=16, seed=11, quant=QuantSpec(n_bits=4))
        base.update(kw)
        return TrainConfig(**base)

    def test_weights_frozen(self, tiny_model, calib_tokens):
        before = tiny_model.weight_bytes()
        train(tiny_model, calib_tokens, self._cfg())
        assert tiny_model.weight_bytes() == before

    def test_single_step(self, tiny_model, calib_tokens):
        scales, trace = train(tiny_model, calib_tokens, self._cfg(steps=1))
        assert len(trace) == 1
        assert trace[0].step == 0

    def test_deterministic_trace(self, tiny_model, calib_tokens):
        _, t1 = train(tiny_model, calib_tokens, self._cfg())
        _, t2 = train(tiny_model, calib_tokens, self._cfg())
        assert [(r.step, r.lr, r.loss) for r in t1] == [(r.step, r.lr, r.loss) for r in t2]

    def test_deterministic_scales(self, tiny_model, calib_tokens):
        s1, _ = train(tiny_model, calib_tokens, self._cfg())
        s2, _ = train(tiny_model, calib_tokens, self._cfg())
        for k in s1:
            assert np.array_equal(s1[k], s2[k])

    def test_scales_respect_floor(self, tiny_model, calib_tokens):
        scales, _ = train(tiny_model, calib_tokens, self._cfg(lr=5.0, steps=4))
        for v in scales.values():
            assert np.all(v >= trainer.SCALE_FLOOR)

    def test_finite_losses_across_seeds(self, tiny_model, calib_tokens):
        for seed in range(5):
            _, trace = train(tiny_model, calib_tokens, self._cfg(seed=seed, steps=4))
            assert all(np.isfinite(r.loss) for r in trace)

    def test_calibration_exhaustion(self, tiny_model, calib_tokens):
        short = calib_tokens[:100]  # 6 windows of 16
        with pytest.raises(DataError):
            train(tiny_model, short, self._cfg(steps=50))

    def test_divergence_error_carries_step(self, tiny_model, calib_tokens):
        broken = tiny_model.copy()
        broken.params["lm_head.bias"] = np.full_like(
            broken.params["lm_head.bias"], np.nan
        )
        with pytest.raises(DivergenceError) as exc:
            train(broken, calib_tokens, self._cfg(quant=None))
        assert exc.value.step == 0

    def test_auto_strategy_rejected_by_train(self, tiny_model, calib_tokens):
        with pytest.raises(ContractError):
            train(tiny_model, calib_tokens, self._cfg(init_strategy="auto"))

    def test_trainable_ratio_below_one_percent(self, desk_config):
        model = build_model(desk_config, seed=0)
        sites = find_fusion_sites(model)
        assert sum(s.channel_count for s in sites) / model.param_count() < 0.01


class TestTrace:
    def test_csv_format(self, tiny_model, calib_tokens, tmp_path):
        _, trace = train(tiny_model, calib_tokens, TrainConfig(
            steps=3, seq_len=16, seed=0, quant=QuantSpec(n_bits=4)))
        path = tmp_path / "trace.csv"
        write_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lr,loss"
        assert len(lines) == 4
        step, lr, loss = lines[1].split(",")
        assert step == "0" and float(lr) == 1e-3 and np.isfinite(float(loss))


class TestSelectInit:
    def test_tie_breaks_to_ones(self, tiny_model, calib_tokens, monkeypatch):
        fixed = [trainer.TraceRecord(step=i, lr=1e-3, loss=2.0) for i in range(10)]

        def fake_train(model, tokens, cfg):
            return {"s": np.ones(4, dtype=np.float32)}, list(fixed)

        monkeypatch.setattr(trainer, "train", fake_train)
        winner, _, _ = select_init(tiny_model, calib_tokens, TrainConfig(steps=10))
        assert winner == "ones"

    def test_lower_final_loss_wins(self, tiny_model, calib_tokens, monkeypatch):
        def fake_train(model, tokens, cfg):
            loss = 1.0 if cfg.init_strategy == "inv_sqrt_cin" else 2.0
            trace = [trainer.TraceRecord(step=i, lr=1e-3, loss=loss) for i in range(10)]
            return {"s": np.ones(4, dtype=np.float32)}, trace

        monkeypatch.setattr(trainer, "train", fake_train)
        winner, _, _ = select_init(tiny_model, calib_tokens, TrainConfig(steps=10))
        assert winner == "inv_sqrt_cin"

    def test_reproducible(self, tiny_model, calib_tokens):
        cfg = TrainConfig(steps=4, seq_len=16, seed=3, quant=QuantSpec(n_bits=3))
        w1, s1, t1 = select_init(tiny_model, calib_tokens, cfg)
        w2, s2, t2 = select_init(tiny_model, calib_tokens, cfg)
        assert w1 == w2
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)
        assert [r.loss for r in t1] == [r.loss for r in t2]

    def test_final_loss_window(self):
        trace = [trainer.TraceRecord(step=i, lr=0.0, loss=float(i)) for i in range(100)]
        assert final_loss(trace) == pytest.approx(np.mean(range(50, 100)))


class TestWindows:
    def test_nonoverlapping_and_shuffled(self):
        tokens = np.arange(100)
        wins = list(calibration_windows(tokens, 10, seed=0))
        assert len(wins) == 9
        starts = sorted(int(w[0][0]) for w in wins)
        assert starts == [0, 10, 20, 30, 40, 50, 60, 70, 80]
        for inp, tgt in wins:
            assert np.array_equal(tgt, inp + 1)

    def test_too_short(self):
        with pytest.raises(DataError):
            list(calibration_windows(np.arange(5), 10, seed=0))
