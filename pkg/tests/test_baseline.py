import numpy as np
import pytest

from storydiffuse.baseline import ARSystem, ar_generate, ar_layout, ar_loss, ar_train, teacher_inputs
from storydiffuse.config import toy_config
from storydiffuse.dataset import BOS_ID, Vocab, grammar_vocab, to_batch
from storydiffuse.nncore import Tensor
from storydiffuse.train import DiffusionSystem

from conftest import tiny_config
from gradcheck import check_grads


@pytest.fixture(scope="module")
def ar():
    return ARSystem(tiny_config(), len(grammar_vocab()))


@pytest.fixture
def batch(tiny_corpus, vocab):
    return to_batch(tiny_corpus["train"], vocab, 16)


def test_layout_and_teacher_inputs():
    seg, panel, pos = ar_layout(2, 3)
    assert seg.tolist() == [0, 0, 1, 1, 1, 1, 1, 1]
    assert panel.tolist() == [0, 1, 0, 0, 0, 1, 1, 1]
    assert pos.tolist() == [3, 3, 0, 1, 2, 0, 1, 2]
    t = np.array([[[5, 6, 7], [8, 9, 0]]])
    assert teacher_inputs(t).tolist() == [[[BOS_ID, 5, 6], [BOS_ID, 8, 9]]]


def test_causal_masking(ar, batch):
    F_v = ar.encoder.image_features(attrs=batch.attrs[:1])
    inp = teacher_inputs(batch.tokens[:1])
    base = ar.decoder.logits(F_v, inp).data
    changed = inp.copy()
    changed[0, 1, 4:] = 3  # panel 1 from position 4 on
    out = ar.decoder.logits(F_v, changed).data
    np.testing.assert_array_equal(out[0, 0], base[0, 0])
    np.testing.assert_array_equal(out[0, 1, :4], base[0, 1, :4])
    assert not np.allclose(out[0, 1, 4:], base[0, 1, 4:])


def test_cached_greedy_matches_teacher_forced_argmax(ar, batch):
    g = ar_generate(ar, batch.attrs[:2])
    F_v = ar.encoder.image_features(attrs=batch.attrs[:2])
    logits = ar.decoder.logits(F_v, teacher_inputs(g.raw_tokens)).data
    np.testing.assert_array_equal(logits.argmax(axis=-1), g.raw_tokens)


@pytest.mark.parametrize("L", [4, 8, 16])
def test_forward_passes_scale_with_length(ar, batch, L):
    assert ar_generate(ar, batch.attrs[:1], max_len=L).forward_passes == 3 * L
    with pytest.raises(ValueError):
        ar_generate(ar, batch.attrs[:1], max_len=17)


def test_loss_gradient(batch):
    system = ARSystem(tiny_config(**{"train.dtype": "float64"}), len(grammar_vocab()))
    w = system.decoder.out_proj.weight

    def op(x):
        system.decoder.out_proj.weight = x
        return ar_loss(system, batch.attrs[:1], batch.tokens[:1])

    check_grads(op, [w.data.copy()], seed_grad=np.array(1.0))


def test_visual_gain_gradient(batch):
    system = ARSystem(tiny_config(**{"train.dtype": "float64"}), len(grammar_vocab()))
    g = system.decoder.visual_gain[0]

    def op(x):
        system.decoder.visual_gain[0] = x
        return ar_loss(system, batch.attrs[:1], batch.tokens[:1])

    check_grads(op, [g.data.copy()], seed_grad=np.array(1.0))


def test_overfits_one_story_within_500_steps(tiny_corpus, vocab):
    cfg = tiny_config(**{"model.d_model": 16, "train.epochs": 500, "train.batch_size": 1, "train.lr": 1e-2})
    _, hist = ar_train(cfg, tiny_corpus["train"][:1], vocab)
    assert len(hist.losses) == 500
    assert min(hist.losses[-20:]) < 0.1


def test_parameter_parity_at_default_config():
    cfg = toy_config()
    V = len(grammar_vocab())
    n_ar = ARSystem(cfg, V).num_parameters(trainable_only=True)
    n_diff = DiffusionSystem(cfg, V).num_parameters(trainable_only=True)
    assert abs(n_ar - n_diff) / n_diff <= 0.1


def test_save_load_round_trip(tmp_path, ar, batch):
    ar.save(tmp_path / "run")
    again = ARSystem.load(tmp_path / "run")
    np.testing.assert_array_equal(ar_generate(again, batch.attrs[:1]).raw_tokens,
                                  ar_generate(ar, batch.attrs[:1]).raw_tokens)
