import json
import math

import pytest
import torch

from conftest import tiny_config
from dssdst.model import DSSDSTModel, load_checkpoint
from dssdst.ontology import derive_turn_examples
from dssdst.tokenization import WordTokenizer
from dssdst.training import (
    NonFiniteLossError,
    Trainer,
    clip_gradients,
    corpus_texts,
    make_batch,
    prepare_instances,
    train,
    word_dropout,
)


def test_word_dropout_rate_is_binomial():
    n, p = 20000, 0.1
    tokens = torch.full((1, n), 7)
    eligible = torch.ones(1, n, dtype=torch.bool)
    eligible[0, : n // 2] = False
    out = word_dropout(tokens, eligible, p, unk_id=1, generator=torch.Generator().manual_seed(0))
    assert torch.all(out[0, : n // 2] == 7)
    dropped = (out[0, n // 2 :] == 1).sum().item()
    m = n // 2
    # five standard deviations of Binomial(m, p)
    assert abs(dropped - m * p) < 5 * math.sqrt(m * p * (1 - p))
    assert word_dropout(tokens, eligible, 0.0, 1) is tokens


def test_clip_gradients_bounds_global_norm():
    params = [torch.nn.Parameter(torch.zeros(5)), torch.nn.Parameter(torch.zeros(3, 3))]
    params[0].grad = torch.full((5,), 4.0)
    params[1].grad = torch.full((3, 3), -2.0)
    before = clip_gradients(params, 0.1)
    assert before == pytest.approx(math.sqrt(5 * 16 + 9 * 4))
    after = math.sqrt(sum(p.grad.pow(2).sum().item() for p in params))
    assert after <= 0.1 + 1e-6


def _instances(model, dialogues):
    examples = [e for d in dialogues for e in derive_turn_examples(d, model.ontology, model.config.k, model.tokenizer)]
    return prepare_instances(examples, model)


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _changed(before, model):
    return {k for k, v in model.state_dict().items() if not torch.equal(before[k], v)}


def test_phases_touch_only_their_own_parameters(tiny_model, syn_dialogues):
    inst = _instances(tiny_model, syn_dialogues[:4])
    trainer = Trainer(tiny_model)
    before = _snapshot(tiny_model)
    trainer.train_preliminary(inst)
    changed = _changed(before, tiny_model)
    assert changed and all(k.startswith("pre_") for k in changed)

    before = _snapshot(tiny_model)
    trainer.train_ult_gen(inst)
    changed = _changed(before, tiny_model)
    assert changed and not any(k.startswith("pre_") for k in changed)


def test_unfreeze_lets_phase_two_update_the_preliminary_selector(syn_ontology, syn_dialogues):
    tok = WordTokenizer.build(corpus_texts(syn_dialogues, syn_ontology))
    model = DSSDSTModel(syn_ontology, tok, tiny_config(unfreeze_preliminary=True))
    before = _snapshot(model)
    Trainer(model).train_ult_gen(_instances(model, syn_dialogues[:4]))
    assert any(k.startswith("pre_") for k in _changed(before, model))


def test_steps_respect_grad_clip(tiny_model, syn_dialogues):
    records = []
    Trainer(tiny_model, log_fn=records.append).train_preliminary(_instances(tiny_model, syn_dialogues[:4]))
    steps = [r for r in records if "step" in r]
    assert steps and all(math.isfinite(r["loss"]) and r["grad_norm"] >= 0 for r in steps)


def test_same_seed_same_weights(syn_ontology, syn_dialogues):
    cfg = tiny_config()
    a = train(syn_dialogues[:4], syn_ontology, cfg).model.state_dict()
    b = train(syn_dialogues[:4], syn_ontology, cfg).model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = train(syn_dialogues[:4], syn_ontology, tiny_config(seed=8)).model.state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_non_finite_loss_dumps_the_batch(tiny_model, syn_dialogues, tmp_path, monkeypatch):
    inst = _instances(tiny_model, syn_dialogues[:2])
    monkeypatch.setattr("dssdst.training.loss_preliminary", lambda probs, labels: probs.sum() * float("nan"))
    trainer = Trainer(tiny_model, out_dir=tmp_path)
    with pytest.raises(NonFiniteLossError) as err:
        trainer.train_preliminary(inst)
    trainer.close()
    dumps = list(tmp_path.glob("nonfinite_preliminary_*.json"))
    assert len(dumps) == 1 and str(dumps[0]) in str(err.value)
    batch = json.loads(dumps[0].read_text())["batch"]
    assert {b["dialogue_id"] for b in batch} <= {d.dialogue_id for d in syn_dialogues[:2]}


def test_training_artifacts(syn_ontology, syn_dialogues, tmp_path):
    res = train(syn_dialogues[:6], syn_ontology, tiny_config(epochs_ult_gen=2), syn_dialogues[6:8], out_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"train_log.jsonl", "best.pt", "last.pt"} <= names
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    epochs = [r for r in lines if r.get("phase") == "ult_gen" and "epoch" in r]
    assert len(epochs) == 2 and all(0.0 <= r["val_joint_acc"] <= 1.0 for r in epochs)
    assert res.best_joint == max(r["val_joint_acc"] for r in epochs)
    best = load_checkpoint(tmp_path / "best.pt")
    assert best.checkpoint_extra["val_joint_acc"] == res.best_joint


def test_make_batch_pads_and_masks(tiny_model, syn_dialogues):
    inst = _instances(tiny_model, syn_dialogues[:2])[:3]
    batch = make_batch(inst, tiny_model.pad_id)
    n = max(x.sel.N for x in inst)
    assert batch.sel.tokens.shape == (3, n)
    for i, x in enumerate(inst):
        assert batch.sel.attention_mask[i].sum().item() == x.sel.N
        assert torch.all(batch.sel.tokens[i, x.sel.N :] == tiny_model.pad_id)
    assert batch.labels.shape == (3, tiny_model.ontology.J)
