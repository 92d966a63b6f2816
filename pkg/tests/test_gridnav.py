import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iit.errors import AmbiguousTarget, NoTarget, ParseError
from iit.network import forward, neural_interchange
from iit.objectives import make_probes, multitask_loss
from iit.scm import get_vals, interchange
from iit.tasks import gridnav as gn
from iit.tasks.gridnav import (GRID, GridNavTask, Obj, World, emit_actions, example_actions,
                               format_command, gen_gridnav_splits, held_out, parse_command,
                               position_deltas, random_example, resolve_target, simulate)


def world(*objs, agent=(0, 0)):
    return World(GRID, tuple(objs), agent)


# -- oracle solver ---------------------------------------------------------------

def test_parse_examples():
    assert parse_command("walk to the small red circle") == ("small", "red", "circle")
    assert parse_command("walk to the square") == (None, None, "square")
    with pytest.raises(ParseError) as err:
        parse_command("walk to the purple circle")
    assert err.value.position == 3
    for bad in ("walk to", "run to the circle", "walk to the circle now", "walk to the red big circle"):
        with pytest.raises(ParseError):
            parse_command(bad)


def test_resolve_examples():
    w = world(Obj(2, 3, 1, "red", "circle"), Obj(0, 5, 2, "blue", "circle"))
    assert resolve_target(w, None, "red", "circle") == (2, 3)
    w = world(Obj(1, 1, 2, "blue", "square"), Obj(4, 4, 1, "blue", "square"))
    assert resolve_target(w, "small", "blue", "square") == (4, 4)
    assert resolve_target(w, "big", "blue", "square") == (1, 1)
    with pytest.raises(NoTarget):
        resolve_target(w, None, None, "cylinder")
    with pytest.raises(AmbiguousTarget):
        resolve_target(w, None, "blue", "square")


def test_position_deltas():
    assert position_deltas((2, 3), (2, 3)) == (0, 0)
    # (row, col): target column 5 row 1, agent column 1 row 4
    assert position_deltas((1, 5), (4, 1)) == (4, -3)


def test_emit_examples():
    assert emit_actions(0, 0) == ("eos",)
    assert emit_actions(3, 0) == ("walk", "walk", "walk", "eos")
    assert emit_actions(0, -2) == ("turn_left", "walk", "walk", "eos")
    assert emit_actions(-1, 1) == ("turn_right", "walk", "turn_right", "walk", "eos")


def test_simulate_basics():
    w = world(agent=(3, 3))
    assert simulate(w, []) == gn.Pose(3, 3, "east", 0)
    assert simulate(w, ["turn_left"] * 4).heading == "east"
    assert simulate(w, ["walk"] * 5).off_grid == 3
    with pytest.raises(ValueError):
        simulate(w, ["jump"])


def test_oracle_self_consistency():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ex = random_example(rng)
        w = ex["I_World"]
        size, color, shape = parse_command(ex["I_Com"])
        assert format_command(size, color, shape) == ex["I_Com"]
        target = resolve_target(w, size, color, shape)
        actions = example_actions(ex)
        pose = simulate(w, actions)
        assert (pose.row, pose.col) == target and pose.off_grid == 0
        assert actions[-1] == "eos" and actions.count("eos") == 1
        dx, dy = position_deltas(target, w.agent)
        assert -(GRID - 1) <= dx <= GRID - 1 and -(GRID - 1) <= dy <= GRID - 1
        assert len(actions) <= gn.MAX_STEPS


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_unique_target_and_determinism(seed):
    a = random_example(np.random.default_rng(seed))
    b = random_example(np.random.default_rng(seed))
    assert a == b
    assert example_actions(a) == example_actions(b)
    size, color, shape = parse_command(a["I_Com"])
    resolve_target(a["I_World"], size, color, shape)  # raises if not unique
    cells = [(o.row, o.col) for o in a["I_World"].objects]
    assert len(set(cells)) == len(cells) and a["I_World"].agent not in cells


# -- causal model --------------------------------------------------------------

def test_causal_output_matches_solver():
    task = GridNavTask(seed=0, k=2, m=2)
    rng = np.random.default_rng(1)
    for _ in range(50):
        ex = random_example(rng)
        assert task.label(ex) == example_actions(ex)


def test_interchange_labels():
    m = gn.gridnav_model()
    w = world(Obj(1, 1, 2, "red", "circle"), Obj(4, 4, 1, "blue", "square"), agent=(2, 2))
    base = {"I_Com": "walk to the red circle", "I_World": w}
    src = {"I_Com": "walk to the blue square", "I_World": w}
    # swapping the color alone gives "blue circle", which picks out nothing
    assert interchange(m, base, src, ["T_Color"])["O"] is None
    assert interchange(m, base, src, ["T_Shape"])["O"] is None
    both = interchange(m, base, src, ["T_Color", "T_Shape"])["O"]
    assert both == get_vals(m, src, ["O"])["O"]
    dy_swap = interchange(m, base, src, ["P_dy"])["O"]
    assert dy_swap == emit_actions(-1, 2)


def test_probe_targets_are_deltas():
    task = GridNavTask(seed=0, k=2, m=2)
    heads, params = make_probes(task, ["P_dx", "P_dy"])
    assert all(len(h.classes) == 11 for h in heads)
    ex = random_example(np.random.default_rng(0))
    loss = multitask_loss(task, heads, params, [ex])
    assert loss.value[0, 0] == pytest.approx(2 * math.log(11))


# -- splits --------------------------------------------------------------------

COUNTS = {"train": 300, "dev": 50, "test": 50, "zero_shot": 100}


def test_novel_color():
    sets = gen_gridnav_splits("novel_color", COUNTS, seed=0)
    def ys(ex):
        _, color, shape = parse_command(ex["I_Com"])
        return color == "yellow" and shape == "square"
    assert not any(ys(x) for x in sets["train"])
    assert all(ys(x) for x in sets["zero_shot"])


def test_novel_size():
    sets = gen_gridnav_splits("novel_size", COUNTS, seed=1)
    def sc(ex):
        size, _, shape = parse_command(ex["I_Com"])
        return size == "small" and shape == "cylinder"
    assert not any(sc(x) for x in sets["train"] + sets["dev"])
    assert all(sc(x) for x in sets["zero_shot"])


def test_novel_direction():
    sets = gen_gridnav_splits("novel_direction", COUNTS, seed=2)
    for ex in sets["zero_shot"]:
        size, color, shape = parse_command(ex["I_Com"])
        dx, dy = position_deltas(resolve_target(ex["I_World"], size, color, shape),
                                 ex["I_World"].agent)
        assert dx < 0 and dy > 0
    assert not any(held_out("novel_direction", x["I_Com"], x["I_World"]) for x in sets["train"])


def test_disabled_split_and_errors():
    sets = gen_gridnav_splits("disabled", COUNTS, seed=3)
    assert sets["zero_shot"] == [] and len(sets["train"]) == 300
    with pytest.raises(ValueError):
        gen_gridnav_splits("novel_length", COUNTS)
    with pytest.raises(ValueError):
        gen_gridnav_splits("disabled", {"train": 0})


def test_splits_deterministic_and_disjoint():
    a = gen_gridnav_splits("novel_color", COUNTS, seed=4)
    assert a == gen_gridnav_splits("novel_color", COUNTS, seed=4)
    train = {(x["I_Com"], x["I_World"]) for x in a["train"]}
    assert not train & {(x["I_Com"], x["I_World"]) for x in a["zero_shot"]}


# -- network -------------------------------------------------------------------

def test_network_shapes_and_decoding():
    task = GridNavTask(seed=0, k=3, m=4)
    exs = [random_example(np.random.default_rng(i)) for i in range(3)]
    out = forward(task.net, exs)
    assert out.shape == (gn.MAX_STEPS * 3, len(gn.ACTIONS))
    preds = task.predict(out)
    assert len(preds) == 3
    for p in preds:
        assert len(p) <= gn.MAX_STEPS
        assert "eos" not in p[:-1]
    assert task.net.site("H_row").width == 4 and task.net.site("E_color").width == 3


def test_teacher_forcing_changes_only_inputs():
    task = GridNavTask(seed=0, k=3, m=4)
    ex = random_example(np.random.default_rng(0))
    labels = [task.label(ex)]
    free = forward(task.net, [ex]).value
    forced = forward(task.net, [ex], targets=task.targets(labels)).value
    # the first step sees the same start token either way
    np.testing.assert_array_equal(free[0], forced[0])


def test_loss_is_mean_token_ce():
    task = GridNavTask(seed=0, k=3, m=4)
    task.net.params["dec.Wo"][:] = 0
    task.net.params["dec.bo"][:] = 0
    exs = [random_example(np.random.default_rng(i)) for i in range(4)]
    labels = [task.label(x) for x in exs]
    out = forward(task.net, exs, targets=task.targets(labels))
    assert task.loss(out, labels).value[0, 0] == pytest.approx(math.log(4))


def test_interchange_self_identity():
    task = GridNavTask(seed=0, k=3, m=4)
    ex = random_example(np.random.default_rng(0))
    base = forward(task.net, [ex]).value
    for site in task.net.sites:
        np.testing.assert_allclose(neural_interchange(task.net, [ex], [ex], site).value, base)


def test_record_roundtrip():
    ex = random_example(np.random.default_rng(5))
    rec = gn.to_record(ex)
    assert rec["actions"] == list(example_actions(ex))
    assert gn.from_record(rec) == ex
    assert World.from_json(ex["I_World"].to_json()) == ex["I_World"]
