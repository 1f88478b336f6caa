use shapereg::prelude::*;

fn main() {
    let mut total_q = 0; let mut total_p = 0;
    for (seed, f) in [(61u64, TestFunction::Exp), (62, TestFunction::SqrtQuad), (63, TestFunction::Softplus), (64, TestFunction::Exp), (65, TestFunction::LogSumExp), (66, TestFunction::QForm)] {
        let (raw, _) = generate_synthetic(f, 10, 100, 3.0, seed).unwrap();
        let (data, _) = standardize(&raw).unwrap();
        let cfg = PalmConfig { use_criterion_b: false, tol: 1e-7, ..Default::default() };
        let (_, r) = palm_fit(&data, &ConstraintSet::Free, &cfg, &SsnConfig::default(), None, None).unwrap();
        let mut q = 0; let mut p = 0;
        for (h, damped) in r.ssn_grad_norms.iter().zip(&r.ssn_damped) {
            if *damped || h.len() < 2 { continue; }
            let tail = &h[h.len().saturating_sub(3)..];
            let pairs: Vec<_> = tail.windows(2).filter(|w| w[0] <= 1e-3).collect();
            if pairs.is_empty() { continue; }
            q += 1;
            if pairs.iter().all(|w| w[1] <= w[0].powf(1.2)) { p += 1; }
        }
        println!("seed {seed}: qual={q} pass={p}");
        total_q += q; total_p += p;
    }
    println!("total: {total_p}/{total_q} = {:.2}", total_p as f64 / total_q.max(1) as f64);
}
