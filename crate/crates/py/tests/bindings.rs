use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(laof_lab::laof_lab)(py);
        let globals = PyDict::new(py);
        globals.set_item("laof_lab", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn flow_helpers_round_trip() {
    with_module(
        r#"
rgb = laof_lab.flow_to_rgb(4, 2, [0.0] * 16, 0.01)
assert rgb == bytes(24)
uv = [0.5, -1.25] * 8
w, h, back = laof_lab.decode_flo(laof_lab.encode_flo(4, 2, uv))
assert (w, h) == (4, 2) and back == uv
"#,
    );
}

#[test]
fn scalar_helpers() {
    with_module(
        r#"
assert abs(laof_lab.compute_lambda(99, 1) - 0.01) < 1e-12
assert abs(laof_lab.pearson([1, 2, 3], [2, 4, 6]) - 1.0) < 1e-9
lab, unl = laof_lab.split_action_ratio(list(range(100)), 0.1, 0)
assert len(lab) == 10 and sorted(lab + unl) == list(range(100))
try:
    laof_lab.split_action_ratio([1, 2], 1.5, 0)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#,
    );
}

#[test]
fn expert_reaches_the_goal() {
    with_module(
        r#"
env = laof_lab.Env(seed=3)
h, w = env.shape
assert len(env.render()) == h * w * 3
reached = False
for _ in range(h + w):
    if env.step(env.expert_action()):
        reached = True
        break
assert reached
env.reset(3)
assert env.step_index == 0
"#,
    );
}

#[test]
fn gradient_suite_is_exposed() {
    with_module(
        r#"
rows = laof_lab.gradient_suite(2, 0)
assert len(rows) == 28
assert all(err < 1e-2 for _, _, err in rows)
"#,
    );
}
