"""Smoke test for the busguard Python bindings.

Build and install the extension first:

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/busguard-*.whl
"""

import busguard


def main():
    names = busguard.scenario_names()
    assert "figure8" in names, names

    out = busguard.run("figure8", inject="jerky,disconnect", seed=42)
    report = out["report"]
    assert report["injections"] == 2, report
    assert report["recall"] is not None
    assert len(out["labels"]) == 2
    print(f"figure8: recall {report['recall']:.2f}, {report['presented_alarms']} presented alarms")

    # same seed, same answer
    again = busguard.run("figure8", inject="jerky,disconnect", seed=42)
    assert again["report"] == report

    m = busguard.Monitor("square", seed=3)
    assert m.health()["mode"] == "full"
    m.step(200)
    assert m.now_ms == 10_000, m.now_ms
    m.inject("jerky", duration_ms=2000)
    m.step(100)
    m.estop()
    assert m.health()["mode"] == "safe"
    assert any(a["severity"] == "critical" for a in m.alarms("presented"))
    assert m.metrics()["pipeline"]["messages"] > 0

    hit = busguard.isolated([5.0, 5.0], [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]], 1.0, 1)
    assert hit is not None and hit[0], hit
    assert busguard.isolated([0.0], [[0.0]], 1.0, 3) is None

    suite = busguard.bench()
    overall = suite["overall"]
    print(f"benchmark: recall {overall['recall']:.2f}, {overall['false_alarm_rate_per_min']:.3f} false alarms/min")
    assert overall["recall"] >= 0.7

    try:
        busguard.run("figure8", inject="gremlins")
    except ValueError:
        pass
    else:
        raise AssertionError("bad injection kind accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
