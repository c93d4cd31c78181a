"""Tiny seeded setups shared by the training, persistence and CLI tests."""

from atcl.config import build_config, with_overrides
from atcl.data import complementary_from_config, load_dataset

TINY = {
    "epochs": 4,
    "batch_size": 32,
    "model.hidden": [16],
    "attack.eps": 0.3,
    "attack.steps": 3,
    "attack.alpha": 0.1,
    "eval.steps": 3,
    "eval.alpha": 0.1,
    "warmup.Ei": 1,
    "warmup.Es": 2,
    "data.source": "synthetic",
    "data.K": 4,
    "data.n_train": 96,
    "data.n_test": 40,
    "data.synthetic.d": 8,
    "data.synthetic.separation": 3.0,
    "data.synthetic.sigma": 0.2,
    "optim.lr": 0.05,
}


def tiny_config(**extra):
    values = dict(TINY)
    values.update(extra)
    return with_overrides(build_config(), values)


def tiny_data(cfg):
    data = load_dataset(cfg.data, cfg.seed)
    train = complementary_from_config(*data["train"], cfg.data, cfg.seed)
    return train, data["test"]
