import numpy as np
import pytest
import torch

from fasterdan.net import (
    ModelConfig,
    backward,
    build_model,
    load_checkpoint,
    read_entries,
    save_checkpoint,
    softmax,
)
from fasterdan.posenc import pe_2d
from fasterdan.scheme import Scheme
from fasterdan.train import forward_batch, loss_fasterdan, make_batch, fasterdan_inputs
from fasterdan.vocab import DocumentStructure, Entity, segment_lines, serialize_document

from .helpers import random_image, teacher_forced_logits, tiny_model

DOC = DocumentStructure((Entity("P", ("abc", "de")), Entity("P", ("f",))))


class TestEncoder:
    def test_feature_grid_shape(self, vocab):
        model = build_model(ModelConfig(vocab.size, d=16, heads=2))
        grid = model.encode_image(torch.zeros(64, 64))
        assert tuple(grid.f2d.shape) == (1, 2, 8, 16)
        assert tuple(grid.f1d.shape) == (1, 16, 16)

    def test_zero_filters_leave_positional_encoding(self, vocab):
        model = tiny_model(vocab)
        with torch.no_grad():
            for p in model.encoder.parameters():
                p.zero_()
        grid = model.encode_image(torch.rand(64, 48, dtype=torch.float64))
        expected = np.asarray(pe_2d(2, 6, 8)).reshape(12, 8)
        np.testing.assert_allclose(grid.f1d[0].detach().numpy(), expected, atol=1e-15)

    def test_flat_rows_follow_grid(self, vocab):
        model = tiny_model(vocab)
        grid = model.encode_image(torch.rand(96, 64, dtype=torch.float64))
        _, h, w, _ = grid.f2d.shape
        pos = np.asarray(pe_2d(h, w, 8))
        rng = np.random.default_rng(0)
        for _ in range(10):
            r, c = rng.integers(h), rng.integers(w)
            np.testing.assert_allclose(grid.f1d[0, r * w + c].detach().numpy(), grid.f2d[0, r, c].detach().numpy() + pos[r, c])

    def test_stride_mismatch_rejected(self, vocab):
        with pytest.raises(ValueError, match="stride"):
            tiny_model(vocab).encode_image(torch.zeros(40, 48))


class TestDecoderStack:
    def _queries(self, model, ids):
        pos = torch.from_numpy(Scheme("dan").positions([(0, t) for t in range(len(ids))], model.cfg.d))
        return model.embed(torch.tensor(ids), pos)

    def test_self_only_query_ignores_others(self, vocab):
        model = tiny_model(vocab)
        feats = model.encode_image(torch.rand(32, 16, dtype=torch.float64))
        mask = torch.eye(2, dtype=torch.bool)
        a = model.decoder_forward(self._queries(model, [3, 4]), feats, mask)[0, 0]
        b = model.decoder_forward(self._queries(model, [3, 9]), feats, mask)[0, 0]
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_cached_steps_equal_one_shot(self, vocab):
        model = tiny_model(vocab, layers=2)
        feats = model.encode_image(torch.rand(32, 32, dtype=torch.float64))
        ids = [vocab.sot_id, 5, 7, 2, 9]
        causal = torch.tril(torch.ones(5, 5, dtype=torch.bool))
        full = model.decoder_forward(self._queries(model, ids), feats, causal)[0]
        cache = model.new_cache()
        q = self._queries(model, ids)
        first = model.decoder_forward(q[:2], feats, causal[:2, :2], cache)[0]
        second = model.decoder_forward(q[2:], feats, causal[2:], cache)[0]
        assert (torch.cat([first, second]) - full).abs().max() < 1e-10

    def test_attention_rows_are_distributions(self, vocab):
        model = tiny_model(vocab)
        attn = model.layers[0].self_attn
        x = torch.rand(1, 2, 5, 4, dtype=torch.float64)
        mask = torch.tensor(np.tril(np.ones((5, 5), bool)))[None]
        _, w = attn.attend(x, x, x, mask, return_weights=True)
        torch.testing.assert_close(w.sum(-1), torch.ones(1, 2, 5, dtype=torch.float64))
        assert (w[..., ~mask[0]] == 0).all()

    def test_mask_shape_checked(self, vocab):
        model = tiny_model(vocab)
        feats = model.encode_image(torch.rand(32, 16, dtype=torch.float64))
        with pytest.raises(ValueError, match="mask shape"):
            model.decoder_forward(self._queries(model, [1, 2]), feats, torch.ones(2, 3, dtype=torch.bool))


class TestProjection:
    def test_zero_projection_is_uniform(self, vocab):
        model = tiny_model(vocab)
        with torch.no_grad():
            model.proj.weight.zero_()
        probs = softmax(model.project_logits(torch.rand(3, 8, dtype=torch.float64)))
        torch.testing.assert_close(probs, torch.full_like(probs, 1 / vocab.size))

    def test_shift_invariance_and_normalization(self):
        scores = torch.randn(20, 30, dtype=torch.float64)
        shifted = scores + torch.randn(20, 1, dtype=torch.float64) * 100
        assert torch.equal(scores.argmax(-1), shifted.argmax(-1))
        probs = softmax(scores)
        assert (probs >= 0).all()
        assert (probs.sum(-1) - 1).abs().max() < 1e-6


class TestBackward:
    def test_sum_of_parameter(self, vocab):
        model = tiny_model(vocab)
        backward(model.proj.weight.sum())
        torch.testing.assert_close(model.proj.weight.grad, torch.ones_like(model.proj.weight))

    def test_unused_embedding_rows_get_zero(self, vocab):
        model = tiny_model(vocab)
        image = random_image(np.random.default_rng(1), 64, 32)
        batch = make_batch([(image, DOC)], vocab, Scheme(), 8, torch.float64)
        loss = torch.nn.functional.cross_entropy(forward_batch(model, batch)[0], batch.targets[0], ignore_index=-100)
        backward(loss)
        used = set(batch.ids[0].tolist())
        unused = [r for r in range(vocab.size + 1) if r not in used]
        assert unused and (model.embedding.weight.grad[unused] == 0).all()

    def test_requires_forward(self):
        with pytest.raises(RuntimeError):
            backward(torch.tensor(1.0))


def test_gradient_check_every_parameter_group(vocab):
    """Central differences (step 1e-5) against autograd on a d=8 one-layer model."""
    model = tiny_model(vocab, seed=3)
    # a generic point: zero biases on blank input would sit exactly on ReLU kinks
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.uniform_(-0.5, 0.5, generator=gen)
    image = np.random.default_rng(2).integers(0, 256, size=(64, 32)).astype(np.uint8)
    seg = segment_lines(serialize_document(DOC, vocab), vocab)
    batch = make_batch([(image, DOC)], vocab, Scheme(), 8, torch.float64)
    coords = fasterdan_inputs(seg, vocab)[0]

    def loss_fn():
        logits = forward_batch(model, batch)[0]
        grid = torch.zeros(seg.L + 1, seg.n_max + 1, vocab.size, dtype=torch.float64)
        for k, (j, i) in enumerate(coords):
            grid[j, i] = logits[k]
        return loss_fasterdan(grid, seg, vocab)

    model.zero_grad()
    backward(loss_fn())
    rng = np.random.default_rng(0)
    h = 1e-5
    for name, p in model.named_parameters():
        analytic = p.grad.detach().flatten()
        flat = p.data.view(-1)
        top = torch.argsort(analytic.abs(), descending=True)[:6].tolist()
        picks = sorted(set(top) | set(rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False).tolist()))
        numeric = []
        with torch.no_grad():
            for k in picks:
                old = flat[k].item()
                flat[k] = old + h
                up = loss_fn().item()
                flat[k] = old - h
                down = loss_fn().item()
                flat[k] = old
                numeric.append((up - down) / (2 * h))
        a = analytic[picks].numpy()
        n = np.array(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale < 1e-9:
            continue  # group has no influence on this loss
        assert np.linalg.norm(a - n) / scale <= 1e-4, name


class TestCausality:
    def test_outputs_ignore_later_columns(self, vocab):
        model = tiny_model(vocab, seed=4)
        image = random_image(np.random.default_rng(3))
        base = DocumentStructure((Entity("P", ("abcd", "efg")),))
        other = DocumentStructure((Entity("P", ("abst", "efq")),))
        a = teacher_forced_logits(model, image, base, vocab)
        b = teacher_forced_logits(model, image, other, vocab)
        # columns 0..2 hold identical tokens in both documents
        for c in a:
            if c[1] <= 2:
                assert (a[c] - b[c]).abs().max() < 1e-10, c

    def test_first_pass_ignores_later_lines_and_columns(self, vocab):
        model = tiny_model(vocab, seed=5)
        image = random_image(np.random.default_rng(4))
        base = DocumentStructure((Entity("P", ("abc", "de")),))
        other = DocumentStructure((Entity("P", ("aqq", "fgh")),))
        a = teacher_forced_logits(model, image, base, vocab)
        b = teacher_forced_logits(model, image, other, vocab)
        # rows 0..3 are <sot>, <D>, <P>, "a..": same initials up to row 3
        for j in range(4):
            assert (a[(j, 0)] - b[(j, 0)]).abs().max() < 1e-10


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, vocab, tmp_path):
        model = build_model(ModelConfig(vocab.size, d=16, heads=2), seed=7)
        meta = {"mode": "fasterdan", "characters": vocab.characters, "epochs_done": 3,
                "state": {"adam.m.000": np.arange(4.0)}}
        save_checkpoint(tmp_path / "a.ckpt", model, meta)
        loaded, loaded_meta = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", loaded, loaded_meta)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded_meta["characters"] == vocab.characters
        assert loaded_meta["epochs_done"] == 3

    def test_same_seed_same_bytes(self, vocab, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(tmp_path / name, build_model(ModelConfig(vocab.size, d=16, heads=2), seed=1))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_layout(self, vocab, tmp_path):
        model = tiny_model(vocab)
        save_checkpoint(tmp_path / "m", model)
        raw = (tmp_path / "m").read_bytes()
        assert raw[:4] == b"FDAN" and raw[4:6] == b"\x01\x00"
        names = [n for n, _ in read_entries(tmp_path / "m")]
        assert names[0] == "config.vocab_size" and "proj.weight" in names

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE\x01\x00")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x")
