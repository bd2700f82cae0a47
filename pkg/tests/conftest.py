import numpy as np
import pytest

from fate import clip, data, text, toy, vision, vit


@pytest.fixture(scope="session")
def tiny_task():
    """Small toy task: (aux, train, test) with a few images per class."""
    return toy.make_toy_task(0, aux_per_class=4, train_per_class=12, test_per_class=4)


@pytest.fixture(scope="session")
def tiny_split(tiny_task):
    _, train, _ = tiny_task
    return data.make_one_shot_split(train, 1, 0)


def make_vision_model(dtype=np.float32, n_dp=12, n_cp=12, seed=0):
    """Random (untrained) backbone with every prompt part attached."""
    bb = vit.VisionBackbone(seed=seed, dtype=dtype).freeze()
    m = vit.PromptModel(bb)
    m.dp = vit.PromptSet(n_dp, bb.d, "DP", np.random.default_rng([seed, 1]), dtype=dtype)
    m.projector = vision.Projector(bb.d, 32, seed=seed + 3, dtype=dtype)
    m.cp = vit.PromptSet(n_cp, bb.d, "CP", np.random.default_rng([seed, 2]), dtype=dtype)
    m.head = vision.ClassifierHead(bb.d, len(toy.DOWNSTREAM), seed=seed + 4, dtype=dtype)
    # a non-trivial head so classification gradients are not all tiny
    m.head.fc.w.data = np.random.default_rng([seed, 9]).normal(0, 0.3, m.head.fc.w.shape).astype(dtype)
    return m


def make_dual(dtype=np.float32, seed=0, depth=2, text_depth=1, scale=30.0):
    """Random dual encoder over the toy vocabulary (not aligned)."""
    visual = vit.VisionBackbone(depth=depth, seed=seed, prefix="visual", dtype=dtype)
    words = clip.vocabulary(toy.auxiliary_classes(), toy.DOWNSTREAM)
    table = text.TokenTable(words, 64, 32, np.random.default_rng([seed, 7]), dtype=dtype)
    enc = text.TextEncoder(table, d=64, depth=text_depth, heads=4, seed=seed, dtype=dtype)
    return clip.DualEncoder(visual, enc, scale, seed).freeze()


@pytest.fixture
def vision_model():
    return make_vision_model()


@pytest.fixture(scope="session")
def dual():
    return make_dual()


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
