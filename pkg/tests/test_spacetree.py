import numpy as np
import pytest

from lazymg.spacetree import (DIRICHLET, HANGING, INTERIOR, MeshResourceError, Spacetree,
                              build_initial_mesh, evaluate_composite, geometric_weights,
                              hanging_count_bruteforce, interpolate_hanging, refine_by_gradient)


def random_mesh(seed, depth=3, rounds=3):
    rng = np.random.default_rng(seed)
    mesh = build_initial_mesh(1)
    for _ in range(rounds):
        leaves = [(l.index, int(i), int(j)) for l in mesh.levels
                  for (i, j), leaf in zip(l.cells, l.leaf) if leaf and l.index < depth]
        pick = rng.choice(len(leaves), size=max(1, len(leaves) // 4), replace=False)
        mesh.refine([leaves[k] for k in pick])
    return mesh


def test_regular_mesh_counts():
    mesh = build_initial_mesh(3)
    assert [l.n_cells for l in mesh.levels] == [1, 9, 81, 729]
    finest = mesh.levels[-1]
    assert finest.n_vertices == 28 * 28
    assert (finest.kind == INTERIOR).sum() == 26 * 26
    assert (finest.kind == DIRICHLET).sum() == 4 * 27
    assert not (finest.kind == HANGING).any()
    assert mesh.dof_counts() == {"interior": 26 * 26, "points": 28 * 28}


def test_depth_five_has_59049_fine_cells():
    mesh = build_initial_mesh(5)
    assert mesh.levels[-1].n_cells == 59_049
    assert mesh.levels[-1].h == pytest.approx(1 / 243)


def test_traversal_is_depth_first_with_x_major_children():
    mesh = build_initial_mesh(2)
    visits = mesh.traverse()
    assert visits[0] == (0, 0, 0)
    assert visits[1] == (1, 0, 0)
    assert visits[2:11] == [(2, i, j) for i in range(3) for j in range(3)]
    assert visits[11] == (1, 0, 1)
    assert len(visits) == 1 + 9 + 81


def test_children_and_parents_consistent():
    mesh = random_mesh(0)
    for coarse, fine in zip(mesh.levels, mesh.levels[1:]):
        for c in np.flatnonzero(coarse.refined):
            kids = coarse.children[c]
            assert (kids >= 0).all()
            assert (fine.parent[kids] == c).all()
            assert sorted(map(tuple, fine.cells[kids] // 3)) == [tuple(coarse.cells[c])] * 9
        assert (coarse.children[~coarse.refined] == -1).all()


@pytest.mark.parametrize("seed", range(6))
def test_hanging_count_matches_bruteforce(seed):
    mesh = random_mesh(seed)
    for lvl in range(mesh.max_level + 1):
        assert (mesh.levels[lvl].kind == HANGING).sum() == hanging_count_bruteforce(mesh, lvl)


def test_refine_bumps_epoch_and_reports_stale_ancestors():
    mesh = build_initial_mesh(2)
    epoch = mesh.epoch
    delta = mesh.refine([(2, 4, 4)])
    assert mesh.epoch == epoch + 1
    assert (2, 4, 4) in delta.stale and (1, 1, 1) in delta.stale and (0, 0, 0) in delta.stale
    assert not mesh.refine([(2, 4, 4)])          # already refined: no-op
    assert mesh.epoch == epoch + 1
    with pytest.raises(ValueError):
        mesh.refine([(3, 0, 0)])                 # parent is a leaf


def test_resource_limit():
    with pytest.raises(MeshResourceError):
        build_initial_mesh(8, max_vertices=1000)
    with pytest.raises(ValueError):
        build_initial_mesh(0)


def test_geometric_weights_partition_of_unity():
    pos = np.array([[px, py] for px in range(4) for py in range(4)])
    w = geometric_weights(pos)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_allclose(w[0], [1, 0, 0, 0])
    np.testing.assert_allclose(w[-1], [0, 0, 0, 1])


def test_hanging_interpolation_reproduces_bilinear_functions():
    mesh = random_mesh(3)
    f = lambda p: 1 + 2 * p[:, 0] - 3 * p[:, 1] + 0.5 * p[:, 0] * p[:, 1]  # noqa: E731
    u = []
    for level in mesh.levels:
        values = f(level.points())
        values[level.kind == HANGING] = 99.0
        u.append(values)
    # coarse parents are exact, so interpolation onto a sub-lattice is exact as well
    interpolate_hanging(mesh, u)
    for level in mesh.levels:
        np.testing.assert_allclose(u[level.index], f(level.points()), atol=1e-12)


def test_evaluate_composite_is_exact_for_bilinear():
    mesh = random_mesh(4)
    f = lambda p: 0.3 - p[:, 0] + 2 * p[:, 1] + p[:, 0] * p[:, 1]  # noqa: E731
    u = [f(level.points()) for level in mesh.levels]
    q = np.random.default_rng(0).uniform(size=(200, 2))
    q = np.vstack([q, [[0, 0], [1, 1], [0.5, 0.5]]])
    np.testing.assert_allclose(evaluate_composite(mesh, u, q), f(q), atol=1e-12)
    with pytest.raises(ValueError):
        evaluate_composite(mesh, u, [[1.5, 0.2]])


def test_refine_by_gradient_targets_steep_region():
    mesh = build_initial_mesh(2)
    u = [np.tanh(20 * (level.points()[:, 0] - 0.5)) for level in mesh.levels]
    delta = refine_by_gradient(mesh, u, fraction=0.1, max_level=3)
    assert delta
    xs = [(i + 0.5) / 9 for lvl, i, j in delta.refine]
    assert all(abs(x - 0.5) < 0.25 for x in xs)


def test_dump_lists_every_cell():
    mesh = random_mesh(1)
    text = mesh.dump()
    assert len(text.splitlines()) == mesh.n_cells()
    assert text.splitlines()[0].startswith("0 0 0 1")


def test_empty_tree_is_single_cell():
    mesh = Spacetree()
    assert mesh.max_level == 0 and mesh.levels[0].n_cells == 1
