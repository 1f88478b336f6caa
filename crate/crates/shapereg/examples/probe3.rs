use shapereg::prelude::*;

fn main() {
    let (raw, _) = generate_synthetic(TestFunction::LogSumExp, 10, 100, 3.0, 65).unwrap();
    let (data, _) = standardize(&raw).unwrap();
    let cfg = PalmConfig { use_criterion_b: false, tol: 1e-7, ..Default::default() };
    let (_, r) = palm_fit(&data, &ConstraintSet::Free, &cfg, &SsnConfig::default(), None, None).unwrap();
    for (k, h) in r.ssn_grad_norms.iter().enumerate() {
        let items: Vec<String> = h.iter().map(|g| format!("{g:.2e}")).collect();
        println!("outer {k}: {}", items.join(" "));
    }
}
