import pytest

from zofa import data
from zofa.grads import pretrain_source
from zofa.net import forward, make_mlp

ACCEPTANCE_SEEDS = (11, 12, 13, 14, 15)


class World:
    """Pretrained source model plus its task splits for one seed."""

    def __init__(self, seed):
        self.seed = seed
        self.train, self.test = data.make_source_task(seed, 32, 10, 4000, 2000)
        net0 = make_mlp(seed, 32, 10, (32,))
        result = pretrain_source(net0, self.train, 300, 0.05)
        self.net = result.net
        self.stats = result.stats
        logits, _ = forward(self.net, self.test.x)
        self.source_acc = float((logits.argmax(axis=1) == self.test.y).mean())


@pytest.fixture(scope="session")
def worlds():
    return {seed: World(seed) for seed in ACCEPTANCE_SEEDS}
