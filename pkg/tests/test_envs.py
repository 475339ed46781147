import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensmcts.core import EnvError, model_step, reset, state_key
from ensmcts.envs import Chain, DeepSea, Sokoban, ToyMR, load_bundled_map, parse_map
from ensmcts.envs import sokoban as sk
from ensmcts.envs.toy_mr import MapParseError


def rollout(env, actions, state=None):
    s = env.reset(0) if state is None else state
    total, out = 0.0, None
    for a in actions:
        out = env.step(s, a)
        total += out.reward
        s = out.next_state
        if out.done:
            break
    return s, total, out


# --- deep sea ------------------------------------------------------------------

def test_deep_sea_reset_at_origin():
    for seed in range(3):
        assert DeepSea(10, seed).reset(seed) == (0, 0)


def test_deep_sea_rejects_small_n():
    with pytest.raises(EnvError):
        DeepSea(1)


def test_deep_sea_right_move_cost():
    env = DeepSea(10, 3)
    out = env.step(env.reset(), int(env.right_action[0, 0]))
    assert out.reward == pytest.approx(-0.001)
    assert env.move_cost == 0.01 / 10


def test_deep_sea_always_right_return():
    env = DeepSea(10, 5)
    s, total = env.reset(), 0.0
    for _ in range(10):
        out = env.step(s, int(env.right_action[s.y, s.x]))
        total += out.reward
        s = out.next_state
    # oracle: N move costs of 0.01/N plus the terminal reward
    assert out.done and out.solved
    assert total == pytest.approx(1.0 - 10 * 0.001)


def test_deep_sea_all_left_zero():
    env = DeepSea(10, 5)
    s, total = env.reset(), 0.0
    for _ in range(10):
        out = env.step(s, 1 - int(env.right_action[s.y, s.x]))
        total += out.reward
        s = out.next_state
    assert out.done and not out.solved and total == 0.0


def test_deep_sea_random_agent_success_rate():
    env = DeepSea(4, 1)
    rng = np.random.default_rng(0)
    wins = 0
    n = 8000
    for _ in range(n):
        _, _, out = rollout(env, rng.integers(0, 2, size=4))
        wins += out.solved
    p = 0.5 ** 4
    assert abs(wins / n - p) < 4 * np.sqrt(p * (1 - p) / n)


def test_deep_sea_encoding():
    env = DeepSea(4)
    obs = env.encode(env.reset())
    assert obs.shape == (16,) and obs[0] == 1 and obs.sum() == 1
    for x in range(5):
        for y in range(4):
            assert np.argmax(env.encode((x, y))) == y * 4 + min(x, 3)
    states = [(1, 2), (3, 3), (0, 1)]
    np.testing.assert_array_equal(env.encode_batch(states), np.array([env.encode(s) for s in states]))


def test_terminal_state_rejected():
    env = DeepSea(3)
    s, _, out = rollout(env, [0, 0, 0])
    assert out.done
    with pytest.raises(EnvError):
        env.step(s, 0)


def test_out_of_range_action():
    env = DeepSea(3)
    with pytest.raises(EnvError):
        model_step(env, env.reset(), 2)


# --- toy MR --------------------------------------------------------------------

CORRIDOR = "rooms 1 1 size 3\n###\nS.G\n###\n"


def test_toy_mr_corridor():
    env = ToyMR(CORRIDOR)
    s, total, out = rollout(env, [3, 3])
    assert out.solved and out.done and total == 1.0


def test_toy_mr_trap():
    env = ToyMR("rooms 1 1 size 3\n#T#\nS.G\n###\n")
    _, _, out = rollout(env, [3, 0])
    assert out.done and not out.solved and out.reward == 0.0


def test_toy_mr_door_needs_key():
    env = ToyMR("rooms 1 1 size 4\n####\nSD.G\nK...\n####\n")
    s = env.reset()
    out = env.step(s, 3)
    assert out.next_state == s and not out.done
    # pick up the key, come back, open the door
    s = env.step(s, 1).next_state
    assert s.keys_held == 1
    s = env.step(s, 0).next_state
    opened = env.step(s, 3).next_state
    assert opened.keys_held == 0 and opened.doors_open == 1
    # the key is gone once taken
    back = env.step(env.step(opened, 2).next_state, 1).next_state
    assert back.keys_held == 0


def test_toy_mr_rooms_and_encoding():
    text = load_bundled_map("six_rooms")
    env = ToyMR(text)
    m = env.map
    assert env.spec.action_count == 4 and env.spec.max_episode_len == 300
    obs = env.encode(env.reset())
    assert len(obs) == m.n_rooms + m.room_size ** 2 + env.n_keys + env.n_doors
    assert obs[-(env.n_keys + env.n_doors):].sum() == 0
    assert env.shortest_solution() is not None


def test_toy_mr_crosses_rooms():
    env = ToyMR(load_bundled_map("two_rooms"))
    assert env.shortest_solution() is not None
    # some path leaves room 0
    seen = set()
    frontier = [env.reset()]
    while frontier:
        s = frontier.pop()
        for a in range(4):
            out = env.step(s, a)
            if not out.done and out.next_state not in seen:
                seen.add(out.next_state)
                frontier.append(out.next_state)
    assert {s.room for s in seen} == {0, 1}


@pytest.mark.parametrize("text,line", [
    ("rooms 1 1 size 3\n###\nS.X\n###\n", 3),
    ("rooms 1 1 size 3\n###\nS.G\n", 3),
    ("rooms 1 1 size 3\n###\n..G\n###\n", 1),
    ("rooms 1 1 size 3\n#S#\nS.G\n###\n", 1),
    ("room 1 1 size 3\n", 1),
])
def test_toy_mr_parse_errors(text, line):
    with pytest.raises(MapParseError) as exc:
        parse_map(text)
    assert exc.value.line == line


def test_toy_mr_parse_error_column():
    with pytest.raises(MapParseError) as exc:
        parse_map("rooms 1 1 size 3\n###\nS?G\n###\n")
    assert (exc.value.line, exc.value.column) == (3, 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=200))
def test_toy_mr_keys_never_negative(actions):
    env = ToyMR(load_bundled_map("six_rooms"))
    s = env.reset()
    for a in actions:
        out = env.step(s, a)
        n = out.next_state
        assert n.keys_held >= 0
        opened = bin(n.doors_open).count("1") - bin(s.doors_open).count("1")
        taken = bin(n.keys_taken).count("1") - bin(s.keys_taken).count("1")
        assert n.keys_held - s.keys_held == taken - opened
        if out.done:
            break
        s = n


# --- sokoban -------------------------------------------------------------------

LEVEL = """\
#####
#@$.#
#####
"""


def test_sokoban_parse_roundtrip():
    b = sk.parse_board(LEVEL)
    assert b.to_text() == LEVEL.strip()
    assert sk.parse_boards(sk.format_boards([b, b])) == [b, b]


def test_sokoban_push_solves():
    env = Sokoban(sk.parse_board(LEVEL))
    s = env.reset()
    assert env.reset() == s
    out = env.step(s, sk.RIGHT)
    assert out.solved and out.done and out.reward == 1.0


def test_sokoban_blocked_push_is_noop():
    env = Sokoban(sk.parse_board("#######\n#@$$..#\n#######\n"))
    s = env.reset()
    out = env.step(s, sk.RIGHT)
    assert out.next_state == s and out.reward == 0.0 and not out.done
    wall = Sokoban(sk.parse_board("####\n#.$#\n# @#\n####\n"))
    s = wall.reset()
    assert wall.step(s, sk.UP).next_state == s


def test_sokoban_step_caps():
    from ensmcts import config
    assert config.preset("sokoban_single").env.max_episode_len == 100
    assert config.preset("sokoban_multi").env.max_episode_len == 200
    assert Sokoban(sk.parse_board(LEVEL)).spec.max_episode_len == 100


def test_sokoban_encoding_partition():
    b = sk.generate_board(10, 10, 4, 30, seed=3)
    env = Sokoban(b)
    obs = env.encode(env.reset()).reshape(10, 10, 7)
    assert obs.shape == (10, 10, 7)
    np.testing.assert_array_equal(obs.sum(axis=2), np.ones((10, 10)))
    assert obs[..., sk.AGENT].sum() + obs[..., sk.AGENT_ON_TARGET].sum() == 1
    assert obs[..., sk.BOX].sum() + obs[..., sk.BOX_ON_TARGET].sum() == 4


def test_sokoban_keys():
    b = sk.parse_board(LEVEL)
    env = Sokoban(b)
    s1 = env.reset()
    s2 = Sokoban(sk.parse_board(LEVEL)).reset()
    assert env.state_key(s1) == state_key(env, s2)
    moved = sk.SokobanState(s1.layout, frozenset({3}), s1.agent)
    assert env.state_key(moved) != env.state_key(s1)


def test_generator_zero_pulls_is_solved():
    b = sk.generate_board(6, 6, 1, 0, seed=1)
    assert b.solved


def test_generator_deterministic():
    a = sk.generate_board(8, 8, 2, 20, seed=11)
    b = sk.generate_board(8, 8, 2, 20, seed=11)
    assert a.to_text() == b.to_text() and a.solution == b.solution


def test_generator_forward_replay_200():
    ok = 0
    for seed in range(200):
        b = sk.generate_board(10, 10, 4, 30, seed=seed)
        assert not b.solved
        ok += sk.replay_solution(b, b.solution)
    assert ok == 200


def _bfs_optimal(board):
    # independent oracle: forward breadth-first search over (agent, boxes)
    from collections import deque
    env = Sokoban(board)
    s0 = env.reset()
    seen = {(s0.agent, s0.boxes)}
    queue = deque([(s0, 0)])
    while queue:
        s, d = queue.popleft()
        for a in range(4):
            o = env.step(s, a)
            if o.solved:
                return d + 1
            k = (o.next_state.agent, o.next_state.boxes)
            if k not in seen:
                seen.add(k)
                queue.append((o.next_state, d + 1))
    return None


@pytest.mark.parametrize("depth", [1, 5, 12])
def test_generator_deepest_is_optimal(depth):
    for seed in range(15):
        b = sk.generate_board(7, 7, 2, depth, seed=seed, method="deepest")
        assert sk.replay_solution(b, b.solution)
        assert len(b.solution) == _bfs_optimal(b) <= depth


def test_generator_deepest_reaches_requested_depth():
    lengths = [len(sk.generate_board(8, 8, 2, 20, seed=s, method="deepest").solution) for s in range(20)]
    assert max(lengths) == 20 and np.median(lengths) == 20


def test_generator_unknown_method():
    with pytest.raises(EnvError):
        sk.generate_board(8, 8, 2, 20, method="magic")


def test_generator_rejects_impossible():
    with pytest.raises(EnvError):
        sk.generate_board(3, 3, 4, 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 3), max_size=60))
def test_sokoban_conserves_boxes(seed, actions):
    b = sk.generate_board(8, 8, 2, 15, seed=seed)
    env = Sokoban(b)
    s = env.reset()
    for a in actions:
        out = env.step(s, a)
        assert len(out.next_state.boxes) == len(b.targets) == 2
        assert not (out.next_state.boxes & out.next_state.layout.walls)
        if out.done:
            break
        s = out.next_state


def _failed_episode(seed=4, steps=12):
    from ensmcts.core import Episode
    b = sk.generate_board(8, 8, 2, 20, seed=seed)
    env = Sokoban(b)
    rng = np.random.default_rng(seed)
    s = env.reset()
    states, actions, rewards = [], [], []
    for _ in range(steps):
        a = int(rng.integers(4))
        out = env.step(s, a)
        if out.done:
            break
        states.append(s)
        actions.append(a)
        rewards.append(out.reward)
        s = out.next_state
    return env, Episode(states, actions, rewards, s, False)


def test_hindsight_relabel():
    from ensmcts.replay import evaluate_episode
    rng = np.random.default_rng(0)
    hits = 0
    for seed in range(30):
        env, ep = _failed_episode(seed, 25)
        new = sk.relabel_episode(ep, rng)
        if new is None:
            continue
        hits += 1
        assert new.solved and new.rewards[-1] == 1.0 and sum(new.rewards) == 1.0
        assert new.final_state.boxes == new.final_state.layout.targets
        # replaying the retained actions under the relabelled targets solves exactly at the end
        s = new.states[0]
        for i, a in enumerate(new.actions):
            out = env.step(s, a)
            assert out.solved == (i == len(new.actions) - 1)
            s = out.next_state
        v = evaluate_episode(new, "factual", 0.99)
        assert v[-1] == 0.0
        if len(v) >= 2:
            assert v[-2] == 1.0
        if len(v) >= 3:
            assert v[-3] == pytest.approx(0.99)
    assert hits > 0


def test_hindsight_degenerate_and_solved():
    from ensmcts.core import Episode
    b = sk.generate_board(8, 8, 2, 20, seed=2)
    env = Sokoban(b)
    s = env.reset()
    # agent walks into a wall: boxes never move, every draw is degenerate
    a = next(a for a in range(4) if env.step(s, a).next_state == s)
    ep = Episode([s, s, s], [a, a, a], [0.0, 0.0, 0.0], s, False)
    assert sk.relabel_episode(ep, np.random.default_rng(0)) is None
    with pytest.raises(sk.HindsightError):
        sk.relabel_episode(Episode([s], [a], [1.0], s, True), np.random.default_rng(0))


# --- chain -----------------------------------------------------------------------

def test_chain_forward_solves():
    env = Chain(5, seed=2)
    _, total, out = rollout(env, env.optimal_actions())
    assert out.solved and total == 1.0


# --- contract-wide properties ------------------------------------------------------

def _envs():
    return [
        DeepSea(8, 1),
        ToyMR(load_bundled_map("six_rooms")),
        Sokoban(sk.generate_board(10, 10, 4, 30, seed=7)),
        Chain(5, 1),
    ]


@pytest.mark.parametrize("env", _envs(), ids=["deep_sea", "toy_mr", "sokoban", "chain"])
def test_determinism_1000_pairs(env):
    rng = np.random.default_rng(0)
    pairs = []
    s = reset(env, 0)
    t = 0
    while len(pairs) < 1000:
        a = int(rng.integers(env.action_count))
        pairs.append((s, a))
        out = env.step(s, a)
        t += 1
        if out.done or t >= env.spec.max_episode_len:
            s, t = reset(env, 0), 0
        else:
            s = out.next_state
    for s, a in pairs:
        before = env.state_key(s)
        o1, o2 = env.step(s, a), env.step(s, a)
        assert env.state_key(s) == before
        assert (env.state_key(o1.next_state), o1.reward, o1.done, o1.solved) == \
            (env.state_key(o2.next_state), o2.reward, o2.done, o2.solved)
        assert not o1.solved or o1.done
        assert -1.0 <= o1.reward <= 1.0
        np.testing.assert_array_equal(env.encode(o1.next_state), env.encode(o2.next_state))
        assert env.encode(s).shape == (env.spec.observation_len,)


def test_reset_keys_stable():
    for env in _envs():
        assert env.state_key(env.reset(3)) == env.state_key(env.reset(3))
