//! Central finite-difference verification of every tensor-engine operation:
//! 5 seeded random instances per op, h = 1e-5, rel-err < 1e-4.

use dfkd_core::tensor::gradcheck::verify_tensor_ops;

#[test]
fn all_ops_match_finite_differences() {
    let reports = verify_tensor_ops(5);
    let mut bad = Vec::new();
    for r in &reports {
        if r.passed() {
            println!("grad-check {:<32} max rel err {:.3e}", r.name, r.max_err);
        } else {
            bad.push(format!("{}: {}", r.name, r.failures.join("; ")));
        }
    }
    assert!(bad.is_empty(), "gradient failures:\n{}", bad.join("\n"));
    assert!(reports.len() >= 30, "suite shrank: {} ops", reports.len());
}
