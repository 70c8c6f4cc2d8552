"""Smoke test for the ghostblend extension module."""

import json
import math

import ghostblend as gb


def test_config_round_trip():
    cfg = gb.StudyConfig.preset("divacancy")
    assert cfg.benchmark == "divacancy"
    assert cfg.sizes == [4.0, 8.0, 16.0, 32.0]
    assert cfg.blend_width("BGFC", 8.0) == 2.0
    assert cfg.outer_radius(1) == 32.0
    back = gb.StudyConfig.from_json(cfg.to_json())
    assert json.loads(back.to_json()) == json.loads(cfg.to_json())
    try:
        gb.StudyConfig.from_json('{"benchmark": "divacancy", "sizes": [8, 4]}')
    except ValueError:
        pass
    else:
        raise AssertionError("decreasing sizes accepted")


def test_cauchy_born():
    t = gb.equilibrium_lattice_scale()
    assert t > 0.0
    _, p = gb.cauchy_born([[0.0, 0.0], [0.0, 0.0]])
    assert max(abs(x) for row in p for x in row) <= 1e-8


def test_audit():
    rows = gb.ghost_audit(3.0, [2.0, 4.0])
    by = {(m, k): r for m, k, r in rows}
    assert by[("BGFC", 2.0)] <= 1e-10
    assert by[("BQCF", 2.0)] <= 1e-10
    assert by[("BQCE", 2.0)] > by[("BQCE", 4.0)] > 0.0


def test_solve_and_study():
    cfg = gb.StudyConfig.preset("divacancy")
    cfg.sizes = [3.0, 4.0, 5.0]
    cfg.methods = ["BQCF", "BGFC"]
    cfg.record_wall_time = False

    sol = gb.solve(cfg, "BGFC", 1)
    assert sol.converged and sol.method == "BGFC"
    assert len(sol.u) == len(sol.nodes)
    assert sol.dead_load is not None
    assert json.loads(sol.to_json())["method"] == "BGFC"

    rows = gb.convergence_study(cfg)
    assert len(rows) == 6 and all(r.is_ok() for r in rows)
    text = gb.to_csv(rows)
    assert text.splitlines()[0].startswith("method,R_a,K_blend,DOF")
    assert [r.err_h1 for r in gb.read_csv(text)] == [r.err_h1 for r in rows]
    for method, points, h1, _, _ in gb.slopes(rows):
        assert points == 3 and h1 < 0.0, (method, h1)


def test_fit_slope():
    pts = [(d, 2.0 / d) for d in (10.0, 100.0, 1000.0)]
    assert math.isclose(gb.fit_slope(pts), -1.0, abs_tol=1e-12)


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
