mod common;

use dbu_core::attacks::{attack_batch, attack_loss, attack_nested, AttackMethod, AttackSpec, LossTarget, Norm};
use dbu_core::eval::model_accuracy;
use dbu_core::models::ModelKind;
use dbu_core::numerics::RngStream;

const KINDS: [ModelKind; 4] = [ModelKind::PostnetFlow, ModelKind::Priornet, ModelKind::Ddnet, ModelKind::Evnet];
const RADII: [f64; 7] = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0];
const SLACK: f64 = 1e-9;

#[test]
fn pgd_beats_fgsm_beats_clean() {
    let p = common::blobs(0);
    for kind in KINDS {
        let m = common::blob_model(kind, &p, 0);
        let labels = &p.test.labels;
        for target in [LossTarget::CrossEntropy, LossTarget::DiffEntropy] {
            for norm in [Norm::L2, Norm::Linf] {
                let mk = |method| AttackSpec::new(method, target).with_norm(norm).with_radius(0.5);
                let mut rng = RngStream::new(0, 3);
                let f = attack_batch(&m, &p.test.features, &mk(AttackMethod::Fgsm), Some(labels), &mut rng).unwrap();
                let g = attack_batch(&m, &p.test.features, &mk(AttackMethod::Pgd), Some(labels), &mut rng).unwrap();
                for i in 0..labels.len() {
                    let x = p.test.row(i);
                    let (clean, _) = attack_loss(&m, x, &mk(AttackMethod::Pgd), Some(labels[i])).unwrap();
                    assert!(f[i].achieved_loss >= clean - SLACK, "{kind} {target:?} {norm:?} fgsm row {i}");
                    assert!(g[i].achieved_loss >= f[i].achieved_loss - SLACK, "{kind} {target:?} {norm:?} pgd row {i}");
                }
            }
        }
    }
}

#[test]
fn pgd_monotone_in_radius() {
    let p = common::blobs(1);
    for kind in KINDS {
        let m = common::blob_model(kind, &p, 1);
        for target in [LossTarget::CrossEntropy, LossTarget::DiffEntropy] {
            // shuffled on purpose: results follow the spec order
            let radii = [1.0, 0.0, 4.0, 0.2, 2.0, 0.1, 0.5];
            let specs: Vec<AttackSpec> = radii
                .iter()
                .map(|&r| AttackSpec::new(AttackMethod::Pgd, target).with_radius(r))
                .collect();
            let res = attack_nested(&m, &p.test.features, &specs, Some(&p.test.labels), &RngStream::new(1, 3)).unwrap();
            for (a, b) in radii.iter().zip(&res).flat_map(|x| radii.iter().zip(&res).map(move |y| (x, y))) {
                let ((r1, lo), (r2, hi)) = (a, b);
                if r1 >= r2 {
                    continue;
                }
                for i in 0..lo.len() {
                    assert!(hi[i].achieved_loss >= lo[i].achieved_loss, "{kind} {target:?} r {r1} -> {r2} row {i}");
                    assert!(hi[i].norm_used <= r2 + 1e-9);
                }
            }
            assert!(res[1].iter().all(|a| a.norm_used == 0.0 && a.loss_delta == 0.0));
        }
    }
}

#[test]
fn accuracy_nonincreasing_in_radius() {
    let p = common::blobs(2);
    for kind in KINDS {
        let m = common::blob_model(kind, &p, 2);
        let mut last = f64::INFINITY;
        for r in RADII {
            let spec = AttackSpec::new(AttackMethod::Pgd, LossTarget::CrossEntropy).with_radius(r);
            let acc = model_accuracy(&m, &p.test, Some(&spec), &mut RngStream::new(2, 7)).unwrap();
            assert!(acc <= last + SLACK, "{kind} r={r}: {acc} > {last}");
            last = acc;
        }
    }
}
