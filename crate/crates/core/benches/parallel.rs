use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_complex::Complex64;
use spin_deom::bath::{BathSpec, Beta};
use spin_deom::deom::{deom_coefficients, deom_rhs, spin_up, DdoScaling, DdoStore, SystemSpec};
use spin_deom::expfit::{sample_tcf, ExponentialSeries, FitStrategy};
use spin_deom::quadrature::QuadratureSpec;
use spin_deom::Execution;

fn series(k: usize) -> ExponentialSeries {
    // Conjugate pairs with spread rates, a stand-in for a fitted bath.
    let mut eta = Vec::new();
    let mut gamma = Vec::new();
    let mut partner = Vec::new();
    for j in 0..k / 2 {
        let g = Complex64::new(0.5 + j as f64, 1.0 + 0.7 * j as f64);
        let e = Complex64::new(0.3 / (j + 1) as f64, -0.1);
        eta.extend([e, e.conj()]);
        gamma.extend([g, g.conj()]);
        partner.extend([2 * j + 1, 2 * j]);
    }
    ExponentialSeries { eta, gamma, partner }
}

fn rhs(c: &mut Criterion) {
    let sys = SystemSpec::new(0.0, 1.0);
    let mut group = c.benchmark_group("deom_rhs");
    group.sample_size(10);
    for (k, tier) in [(6usize, 6usize), (10, 5)] {
        let s = series(k);
        let coeffs = deom_coefficients(&s);
        let scale = DdoScaling::Amplitude.factors(&coeffs);
        let store = DdoStore::full(k, tier, usize::MAX, scale, spin_up()).unwrap();
        let label = format!("K{k}_L{tier}_{}ddos", store.len());
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), &label), &store, |b, st| {
                b.iter(|| deom_rhs(st, &sys, &coeffs, exec))
            });
        }
    }
    group.finish();
}

fn tcf(c: &mut Criterion) {
    let spec = BathSpec::ohmic(0.1, 6.0, Beta::Finite(2.0)).unwrap();
    let strategy = FitStrategy { plateau_time: 10.0, ..FitStrategy::default() };
    let quad = QuadratureSpec::default();
    let mut group = c.benchmark_group("sample_tcf");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| sample_tcf(&spec, &strategy, &quad, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rhs, tcf);
criterion_main!(benches);
