use pyo3::prelude::*;

#[pymodule]
fn faceforge_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
