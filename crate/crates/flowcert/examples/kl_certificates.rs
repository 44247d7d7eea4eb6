//! The certificate arithmetic on its own: binary relative entropy, its
//! partial inverse, and how the two bound formulas assemble from itemized
//! complexity components.
//!
//! Run with: cargo run --release --example kl_certificates

use flowcert::bounds::{binary_kl, kl_bound, kl_inverse, mcallester_bound, BoundCertificate, BoundInputs};

fn main() -> anyhow::Result<()> {
    println!("binary kl divergence:");
    for (u, v) in [(0.1, 0.3), (0.0, 0.5), (0.25, 0.25)] {
        println!("  kl({u} || {v}) = {:.6}", binary_kl(u, v)?);
    }

    println!("\npartial inverse kl^-1(u | c) = sup {{ v : kl(u||v) <= c }}:");
    for (u, c) in [(0.0, 0.1), (0.1, 0.05), (0.1, 0.5), (0.2, 1000.0)] {
        println!("  kl^-1({u} | {c}) = {:.6}", kl_inverse(u, c));
    }

    // A certificate for a hypothetical run: 500 training points, empirical
    // 01-error 8%, log-density ratio 40 nats, Laplacian integral 2.5 nats,
    // best-of-50 horizons at 99.5% confidence.
    let cert = BoundCertificate::evaluate(0.08, 40.0, 2.5, 500, 0.005, 50)?;
    println!("\ncertificate for loss 0.08, complexity 42.5 nats, m = 500, K = 50, delta = 0.005:");
    println!("  penalty ln(K xi / delta)  = {:.4}", cert.components.penalty);
    println!("  square-root bound         = {:.4}", cert.mcallester);
    println!("  kl-inverse bound          = {:.4}", cert.kl_inv);

    // The kl form is never looser than the square-root form.
    let inputs = BoundInputs::new(0.08, 42.5, 500, 0.005, 50)?;
    assert!(kl_bound(&inputs) <= mcallester_bound(&inputs));
    println!("\nkl-inverse <= square-root bound, as Pinsker guarantees");
    Ok(())
}
