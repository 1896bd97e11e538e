use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(svfreg_py::svfreg_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("sv", module).unwrap();
        let src = CString::new(code).unwrap();
        if let Err(e) = py.run(&src, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn constant_velocity_round_trips_through_python() {
    run(r#"
v = sv.VectorField.constant((10, 10, 10), (1.0, 0.5, -2.0))
u = sv.integrate_svf(v, 8)
assert max(abs(a - b) for a, b in zip(u.data(), v.data())) < 1e-9
assert sv.integrate_svf(-v).data()[0] == -1.0
"#);
}

#[test]
fn predictor_starts_at_identity() {
    run(r#"
case = sv.make_phantom(dims=24, radial_scale=0.8, seed=4)
p = sv.Predictor(seed=1, dropout=0.2)
u, warped = p.register(case["fixed"], case["moving"], "inv")
assert max(abs(x) for x in u.data()) == 0.0
assert warped.data() == case["fixed"].data()
assert 0.0 < case["delta_v_analog"] < 1.0
"#);
}

#[test]
fn bad_input_raises_value_error() {
    run(r#"
try:
    sv.Predictor().register(sv.ScalarVolume((8, 8, 8), [0.0] * 512), sv.ScalarVolume((8, 8, 8), [0.0] * 512), "up")
    raise SystemExit("no error")
except ValueError as e:
    assert "direction" in str(e)
"#);
}
