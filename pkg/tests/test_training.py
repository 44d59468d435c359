import math

import numpy as np
import pytest
import torch

from transfusion.codec import raw_latent
from transfusion.diffusion import make_cosine_schedule
from transfusion.model import ModelConfig, collate, init_params
from transfusion.seqcore import DEFAULT_VOCAB, LatentImage, MixedSequence, Patch, Token, assemble_sequence
from transfusion.training import (LossBreakdown, NumericError, TrainConfig, apply_lm_mask,
                                  baseline_lm_loss, collate_examples, lm_loss, lr_at,
                                  make_optimizer, make_training_example, train_step, transfusion_loss)

V = DEFAULT_VOCAB


def tiny_cfg(**kw):
    base = dict(layers=2, embed_dim=16, heads=2, patch_window=2, patch_channels=3)
    base.update(kw)
    return ModelConfig(**base)


def image(seed=0, size=4):
    return LatentImage(np.random.default_rng(seed).uniform(-1, 1, (size, size, 3)))


def positions(mask):
    return [int(i) for i in np.nonzero(mask)[0]]


def test_lm_mask_worked_example():
    p = np.zeros(2)
    seq = assemble_sequence([5, 7], [p, p], (1, 2), True)
    seq.elements.append(Token(9))
    # [BOS, 5, 7, BOI, p, p, EOI, 9]
    assert positions(apply_lm_mask(seq)) == [0, 1, 2, 6]


def test_lm_mask_text_only_and_image_only():
    seq = assemble_sequence([5, 7], [], None, True)
    assert positions(apply_lm_mask(seq)) == [0, 1]
    seq = assemble_sequence([], [np.zeros(2)], (1, 1), True)
    assert positions(apply_lm_mask(seq)) == [0]


def test_training_example_construction():
    sched = make_cosine_schedule(1000)
    cfg = TrainConfig(caption_first_prob=1.0, caption_dropout_prob=0.0)
    rng = np.random.default_rng(0)
    ex = make_training_example("ab", image(), cfg, rng, sched, 2)
    assert ex.caption_first and 1 <= ex.t <= 1000
    ids = [e.id if isinstance(e, Token) else "p" for e in ex.seq.elements]
    assert ids == [V.bos, ord("a"), ord("b"), V.boi, "p", "p", "p", "p", V.eoi]
    assert ex.eps.shape == (4, 12)


def test_training_example_noise_is_applied_before_patchify():
    sched = make_cosine_schedule(100)
    cfg = TrainConfig(T=100, caption_first_prob=1.0, caption_dropout_prob=0.0)
    img = image(3)
    ex = make_training_example("x", img, cfg, np.random.default_rng(4), sched, 2)
    from transfusion.seqcore import unpatchify
    eps_img = unpatchify(ex.eps, (2, 2), 2, 3).data
    x_t = unpatchify([e.vector for e in ex.seq.elements if isinstance(e, Patch)], (2, 2), 2, 3).data
    ab = sched.alpha_bar[ex.t]
    np.testing.assert_allclose(x_t, math.sqrt(ab) * img.data + math.sqrt(1 - ab) * eps_img, atol=1e-12)


def test_dropout_removes_caption():
    sched = make_cosine_schedule(10)
    cfg = TrainConfig(T=10, caption_dropout_prob=1.0)
    ex = make_training_example("caption", image(), cfg, np.random.default_rng(0), sched, 2)
    ids = [e.id for e in ex.seq.elements if isinstance(e, Token)]
    assert ids == [V.bos, V.boi, V.eoi] and ex.dropped


def test_noise_limit_only_for_image_first():
    sched = make_cosine_schedule(1000)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(caption_first_prob=0.0, noise_limit=500)
    ts = [make_training_example("a", image(), cfg, rng, sched, 2).t for _ in range(10_000)]
    assert max(ts) <= 500 and min(ts) >= 1
    cfg = TrainConfig(caption_first_prob=1.0, noise_limit=500)
    ts = [make_training_example("a", image(), cfg, rng, sched, 2).t for _ in range(2000)]
    assert max(ts) > 500


def test_ordering_and_dropout_frequencies():
    sched = make_cosine_schedule(50)
    cfg = TrainConfig(T=50)
    rng = np.random.default_rng(1)
    exs = [make_training_example("ab", image(size=2), cfg, rng, sched, 2) for _ in range(10_000)]
    first = np.mean([e.caption_first for e in exs])
    dropped = np.mean([e.dropped for e in exs])
    assert abs(first - 0.8) <= 0.02
    assert abs(dropped - 0.1) <= 0.02


def test_lm_loss_examples():
    logits = torch.zeros(1, 3, 4)
    targets = torch.tensor([[1, 2, 3]])
    mask = torch.tensor([[True, True, False]])
    assert lm_loss(logits, targets, mask).item() == pytest.approx(math.log(4), abs=1e-6)
    sharp = torch.zeros(1, 3, 4, dtype=torch.float64)
    sharp[0, torch.arange(3), targets[0]] = 10.0
    # margin 10 over 3 rivals: log(1 + 3 e^-10)
    assert lm_loss(sharp, targets, mask).item() == pytest.approx(math.log1p(3 * math.exp(-10)), rel=1e-9)
    binary = torch.tensor([[[10.0, 0.0], [0.0, 10.0]]], dtype=torch.float64)
    loss = lm_loss(binary, torch.tensor([[0, 1]]), torch.tensor([[True, True]])).item()
    assert loss == pytest.approx(math.log1p(math.exp(-10)), rel=1e-9) and loss < 1e-4
    assert lm_loss(logits, targets, torch.zeros_like(mask)).item() == 0.0


def test_baseline_loss_uniform():
    logits = torch.zeros(2, 5, 512)
    ids = torch.randint(0, 512, (2, 5))
    loss = baseline_lm_loss(logits, ids, torch.tensor([5, 3]))
    assert loss.item() == pytest.approx(math.log(512), abs=1e-5)


def _batch(seed=0, n=4, cfg=None, tcfg=None):
    cfg = cfg or tiny_cfg()
    tcfg = tcfg or TrainConfig(T=100, caption_dropout_prob=0.0)
    sched = make_cosine_schedule(tcfg.T)
    rng = np.random.default_rng(seed)
    exs = [make_training_example(c, image(i), tcfg, rng, sched, cfg.patch_window)
           for i, c in enumerate(["a red square", "a blue cross", "hi", "a green circle"][:n])]
    return collate_examples(exs, tcfg, dtype=torch.float64)


def test_total_is_linear_combination():
    lb = LossBreakdown(torch.tensor(2.0), torch.tensor(0.1), torch.tensor(2.0) + 5 * torch.tensor(0.1), 3, 1)
    assert lb.total.item() == pytest.approx(2.5)
    cfg = tiny_cfg()
    model = init_params(cfg, dtype=torch.float64)
    tb = _batch(cfg=cfg)
    out = model(tb.batch)
    l5 = transfusion_loss(tb, out, 5.0)
    l10 = transfusion_loss(tb, out, 10.0)
    assert (l10.total - l10.lm_loss).item() == 2 * (l5.total - l5.lm_loss).item()
    assert l5.images_counted == 4


def test_text_only_batch_total_equals_lm():
    cfg = tiny_cfg()
    model = init_params(cfg, dtype=torch.float64)
    seq = assemble_sequence([1, 2, 3], [], None, True)
    from transfusion.training import TrainBatch, next_token_targets
    batch = collate([seq], dtype=torch.float64)
    tb = TrainBatch(batch, next_token_targets(batch.ids, V.pad),
                    torch.from_numpy(apply_lm_mask(seq))[None], torch.zeros(0, 12, dtype=torch.float64))
    lb = transfusion_loss(tb, model(batch), 5.0)
    assert lb.images_counted == 0 and lb.total.item() == lb.lm_loss.item()


def test_loss_separation():
    cfg = tiny_cfg()
    model = init_params(cfg, dtype=torch.float64)
    tb = _batch(cfg=cfg)
    out = model(tb.batch)
    lb = transfusion_loss(tb, out, 5.0)
    g_lm_eps, g_lm_logits = torch.autograd.grad(lb.lm_loss, [out.eps_pred, out.logits], retain_graph=True,
                                                allow_unused=True, materialize_grads=True)
    g_dd_eps, g_dd_logits = torch.autograd.grad(lb.ddpm_loss, [out.eps_pred, out.logits],
                                                allow_unused=True, materialize_grads=True)
    assert torch.count_nonzero(g_lm_eps) == 0
    assert torch.count_nonzero(g_dd_logits) == 0
    assert torch.count_nonzero(g_lm_logits) > 0 and torch.count_nonzero(g_dd_eps) > 0


def test_no_lm_gradient_from_patch_or_boi_inputs():
    cfg = tiny_cfg()
    model = init_params(cfg, dtype=torch.float64)
    tb = _batch(cfg=cfg)
    out = model(tb.batch)
    lb = transfusion_loss(tb, out, 5.0)
    (g,) = torch.autograd.grad(lb.lm_loss, [out.logits])
    silent = tb.batch.is_patch | (tb.batch.ids == V.boi)
    assert torch.count_nonzero(g[silent]) == 0
    # hence the unembedding only ever sees hidden states from loss positions
    assert torch.count_nonzero(g[tb.lm_mask]) > 0


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, lr_floor=1e-4, warmup_steps=10, max_steps=110)
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(9, cfg) == pytest.approx(1e-3)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(60, cfg) == pytest.approx(5.5e-4)
    assert lr_at(110, cfg) == pytest.approx(1e-4)
    lrs = [lr_at(s, cfg) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_zero_gradient_step_only_decays():
    cfg = tiny_cfg()
    model = init_params(cfg, dtype=torch.float64)
    tcfg = TrainConfig(lr=1e-2, warmup_steps=1)
    opt = make_optimizer(model, tcfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for n, p in model.named_parameters():
        decay = tcfg.weight_decay if p.ndim >= 2 else 0.0
        assert torch.allclose(p, before[n] * (1 - tcfg.lr * decay), atol=1e-15), n


def test_train_step_is_deterministic():
    def run():
        torch.manual_seed(0)
        cfg = tiny_cfg()
        model = init_params(cfg, 0)
        tcfg = TrainConfig(T=100, warmup_steps=2, max_steps=5)
        opt = make_optimizer(model, tcfg)
        out = []
        for step in range(5):
            tb = _batch(seed=step, cfg=cfg, tcfg=tcfg).to(torch.float32)
            out.append(train_step(model, opt, tb, tcfg, step).as_floats())
        return out, model.state_dict()
    (a, sa), (b, sb) = run(), run()
    assert a == b
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_non_finite_loss_aborts():
    cfg = tiny_cfg()
    model = init_params(cfg)
    with torch.no_grad():
        model.unembed.weight.fill_(float("nan"))
    tcfg = TrainConfig(T=100)
    with pytest.raises(NumericError):
        train_step(model, make_optimizer(model, tcfg), _batch(cfg=cfg).to(torch.float32), tcfg, 0)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(caption_first_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(noise_limit=2000)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lambda_": 2})
    cfg = TrainConfig(noise_limit=500, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
