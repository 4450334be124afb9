//! Sequential vs rayon execution for the two data-parallel hot paths:
//! per-user beam evaluation and per-instance gradients of a batch.

use bearlab::harness::config::{ExperimentConfig, Objective};
use bearlab::harness::eval::evaluate_instances;
use bearlab::harness::train::{instance_gradient, model_config};
use bearlab::harness::{decode_config, ensure_data, DatasetSpec, Layout};
use bearlab::par::{self, Exec};
use bearlab::seqmodel::SequenceModel;
use criterion::{criterion_group, criterion_main, Criterion};

fn setup() -> (ExperimentConfig, bearlab::catalog::Catalog, bearlab::harness::Dataset, SequenceModel) {
    let mut cfg = ExperimentConfig::default();
    if let DatasetSpec::Synthetic(s) = &mut cfg.dataset {
        s.users = 200;
        s.catalog_size = 60;
    }
    let dir = tempfile::tempdir().unwrap();
    let (cat, ds) = ensure_data(&cfg, &Layout::new(dir.path())).unwrap();
    let model = SequenceModel::new(model_config(&cfg, &cat, &ds, 0)).unwrap();
    (cfg, cat, ds, model)
}

fn execs() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_eval(c: &mut Criterion) {
    let (cfg, cat, ds, model) = setup();
    let decode = decode_config(&cfg, &cat);
    let insts = &ds.test[..ds.test.len().min(32)];
    let mut g = c.benchmark_group("evaluate_instances");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_function(name, |b| {
            b.iter(|| evaluate_instances(&model, &cat, insts, &decode, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let (cfg, cat, ds, model) = setup();
    let decode = decode_config(&cfg, &cat);
    let batch = &ds.train[..ds.train.len().min(cfg.batch_size)];
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for objective in [Objective::Sft, Objective::Bear] {
        for (name, exec) in execs() {
            g.bench_function(format!("{}/{name}", objective.name()), |b| {
                b.iter(|| {
                    par::map(exec, batch, |inst| {
                        instance_gradient(&model, &cat, inst, objective, &cfg.hyper, &decode).unwrap()
                    })
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_eval, bench_gradients);
criterion_main!(benches);
