use proptest::collection::vec;
use proptest::prelude::*;

use aggc::baseline::{GlobalClip, GlobalClipConfig};
use aggc::clip::{
    group_norm, views_of, AggcClipper, AggcConfig, ClipAction, ClipDecision, ClipStrategy,
    EmaScaleState, Group, GroupGradients, GroupId, GroupPartition, ScheduleConfig, StepContext,
};
use aggc::telemetry::{read_csv, read_jsonl, CsvSink, JsonlSink, StepRecord, Telemetry};

fn partition(ids: &[&str]) -> GroupPartition {
    GroupPartition::new(
        ids.iter()
            .map(|id| Group {
                id: GroupId::from(*id),
                members: vec![format!("{id}.w")],
            })
            .collect(),
    )
    .unwrap()
}

fn group(id: &str, data: Vec<f64>) -> GroupGradients {
    GroupGradients {
        group_id: GroupId::from(id),
        tensors: vec![(format!("{id}.w"), data)],
    }
}

/// A direction and a target norm; the buffer is the direction rescaled
/// to that norm.
fn shaped(direction: &[f64], norm: f64) -> Vec<f64> {
    let len = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter().map(|x| x / len * norm).collect()
}

fn direction() -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0f64..1.0, 1..24).prop_filter("nonzero", |d| d.iter().any(|x| x.abs() > 1e-3))
}

fn norm_value() -> impl Strategy<Value = f64> {
    (-3.0f64..3.0).prop_map(|e| 10f64.powf(e))
}

fn schedule(lo: f64, hi: f64) -> impl Strategy<Value = ScheduleConfig> {
    (lo..hi, lo..hi, 0.0f64..0.6, 0.01f64..1.0, any::<bool>()).prop_map(
        |(init, late, onset, w, constant)| ScheduleConfig {
            alpha_init: init,
            alpha_late: late,
            onset,
            window: w.min(1.0 - onset).max(0.01),
            constant,
        },
    )
}

fn aggc_config() -> impl Strategy<Value = AggcConfig> {
    (0.0f64..0.999, schedule(0.1, 0.95), schedule(1.05, 3.0)).prop_map(|(beta, low, high)| {
        AggcConfig {
            beta,
            low,
            high,
            ..Default::default()
        }
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn run_single(
    cfg: AggcConfig,
    dir: &[f64],
    norms: &[f64],
) -> Vec<(ClipDecision, f64, Vec<f64>, Vec<f64>)> {
    let mut clipper = AggcClipper::new(cfg, &partition(&["g"])).unwrap();
    let total = norms.len() as u64;
    norms
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            let mut grads = vec![group("g", shaped(dir, n))];
            let before = grads[0].tensors[0].1.clone();
            let d = clipper
                .step(
                    &mut views_of(&mut grads),
                    StepContext::new(t as u64, total).unwrap(),
                )
                .unwrap()
                .remove(0);
            let post = grads[0].norm().unwrap();
            (d, post, before, grads.remove(0).tensors.remove(0).1)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn post_norm_respects_the_interval(cfg in aggc_config(), dir in direction(), norms in vec(norm_value(), 1..60)) {
        for (d, post, _, _) in run_single(cfg, &dir, &norms) {
            let iv = d.interval().unwrap();
            let n = d.pre_norm;
            let shrink = n / (n + cfg.epsilon);
            prop_assert!(post <= iv.upper * (1.0 + 1e-9), "post {post} above upper {}", iv.upper);
            let guarded = iv.lower / (n + cfg.epsilon) <= 1.0;
            prop_assert!(guarded || post >= iv.lower * shrink * (1.0 - 1e-9), "post {post} below lower {}", iv.lower);
        }
    }

    #[test]
    fn scaling_preserves_direction(cfg in aggc_config(), dir in direction(), norms in vec(norm_value(), 1..40)) {
        for (d, _, before, after) in run_single(cfg, &dir, &norms) {
            prop_assert!((cosine(&before, &after) - 1.0).abs() <= 1e-12);
            for (a, b) in after.iter().zip(&before) {
                prop_assert_eq!(*a, b * if d.action == ClipAction::None { 1.0 } else { d.scale_factor });
            }
        }
    }

    #[test]
    fn groups_do_not_interact(
        cfg in aggc_config(),
        shared in vec(norm_value(), 1..40),
        noise in vec(norm_value(), 40),
        dir in direction(),
    ) {
        let ids = ["a", "b", "c"];
        let run = |perturb: bool| {
            let mut clipper = AggcClipper::new(cfg, &partition(&ids)).unwrap();
            let mut out = Vec::new();
            for (t, &n) in shared.iter().enumerate() {
                let a_norm = if perturb { noise[t] } else { n };
                let mut grads = vec![
                    group("a", shaped(&dir, a_norm)),
                    group("b", shaped(&dir, n)),
                    group("c", shaped(&dir, 2.0 * n)),
                ];
                let ctx = StepContext::new(t as u64, shared.len() as u64).unwrap();
                let d = clipper.step(&mut views_of(&mut grads), ctx).unwrap();
                out.push((d[1..].to_vec(), grads[1..].to_vec()));
            }
            out
        };
        prop_assert_eq!(run(false), run(true));
    }

    #[test]
    fn ema_contracts_toward_a_constant_norm(beta in 0.0f64..0.9999, s0 in norm_value(), n in norm_value(), steps in 1usize..200) {
        let mut ema = EmaScaleState::new(beta, 1).unwrap();
        let mut prev = ema.update(0, s0);
        for _ in 0..steps {
            let next = ema.update(0, n);
            prop_assert!((next - n).abs() <= beta * (prev - n).abs() * (1.0 + 1e-12) + 1e-15 * n);
            prev = next;
        }
    }

    #[test]
    fn schedule_is_continuous_and_monotone(s in schedule(0.1, 3.0), total in 10u64..5000) {
        let mut prev = s.evaluate(StepContext::new(0, total).unwrap());
        let slope = (s.alpha_late - s.alpha_init).abs() / s.window;
        let rising = s.alpha_late >= s.alpha_init;
        for t in 1..=total {
            let a = s.evaluate(StepContext::new(t, total).unwrap());
            let jump = (a - prev).abs();
            prop_assert!(jump <= slope / total as f64 * (1.0 + 1e-9) + 1e-12);
            if s.constant {
                prop_assert_eq!(a, s.alpha_init);
            } else if rising {
                prop_assert!(a >= prev - 1e-15);
            } else {
                prop_assert!(a <= prev + 1e-15);
            }
            prop_assert!(a >= s.min_alpha() && a <= s.max_alpha());
            prev = a;
        }
    }

    #[test]
    fn steady_norms_are_left_untouched(beta in 0.0f64..0.999, n in norm_value(), dir in direction(), steps in 1usize..50) {
        // constant norms keep S = n, and n always sits inside [0.5n, 2n]
        let cfg = AggcConfig {
            beta,
            low: ScheduleConfig::constant(0.5),
            high: ScheduleConfig::constant(2.0),
            ..Default::default()
        };
        for (d, _, before, after) in run_single(cfg, &dir, &vec![n; steps]) {
            prop_assert_eq!(d.action, ClipAction::None);
            prop_assert_eq!(d.scale_factor, 1.0);
            prop_assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn identical_inputs_give_identical_decisions(cfg in aggc_config(), dir in direction(), norms in vec(norm_value(), 1..40)) {
        prop_assert_eq!(run_single(cfg, &dir, &norms), run_single(cfg, &dir, &norms));
    }

    #[test]
    fn global_clip_uses_one_factor(max_norm in 0.01f64..10.0, dirs in vec(direction(), 2..6), norms in vec(norm_value(), 6)) {
        let ids: Vec<String> = (0..dirs.len()).map(|i| format!("g{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let cfg = GlobalClipConfig { max_norm, epsilon: 1e-6 };
        let mut clip = GlobalClip::new(cfg, &partition(&refs)).unwrap();
        let mut grads: Vec<GroupGradients> =
            dirs.iter().zip(&ids).zip(&norms).map(|((d, id), &n)| group(id, shaped(d, n))).collect();
        let before = grads.clone();
        let decisions = clip.step(&mut views_of(&mut grads), StepContext::new(0, 1).unwrap()).unwrap();
        let c = decisions[0].scale_factor;
        prop_assert!(decisions.iter().all(|d| d.scale_factor == c && d.action == decisions[0].action));
        for (g, b) in grads.iter().zip(&before) {
            for (x, y) in g.tensors[0].1.iter().zip(&b.tensors[0].1) {
                prop_assert_eq!(*x, if decisions[0].action == ClipAction::None { *y } else { y * c });
            }
        }
    }

    #[test]
    fn global_clip_spills_a_spike_onto_other_groups(dir in direction(), b_norm in 0.01f64..0.5, spike in 10.0f64..1e3) {
        let cfg = GlobalClipConfig { max_norm: 1.0, epsilon: 1e-6 };
        let scale_of_b = |a_norm: f64| {
            let mut clip = GlobalClip::new(cfg, &partition(&["a", "b"])).unwrap();
            let mut grads = vec![group("a", shaped(&dir, a_norm)), group("b", shaped(&dir, b_norm))];
            let d = clip.step(&mut views_of(&mut grads), StepContext::new(0, 1).unwrap()).unwrap();
            if d[1].action == ClipAction::None { 1.0 } else { d[1].scale_factor }
        };
        prop_assert_eq!(scale_of_b(0.1), 1.0);
        prop_assert!(scale_of_b(spike) < 1.0);
    }

    #[test]
    fn group_norm_matches_the_flattened_norm(tensors in vec(vec(-1e3f64..1e3, 1..50), 100)) {
        let mut g = GroupGradients {
            group_id: GroupId::from("g"),
            tensors: tensors.iter().enumerate().map(|(i, t)| (format!("t{i}"), t.clone())).collect(),
        };
        let flat: Vec<f64> = tensors.concat();
        let expected = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = group_norm(&g.view_mut()).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn telemetry_round_trips(cfg in aggc_config(), dir in direction(), norms in vec(norm_value(), 1..30)) {
        let tmp = tempfile::tempdir().unwrap();
        let csv_path = tmp.path().join("steps.csv");
        let jsonl_path = tmp.path().join("steps.jsonl");
        let mut telemetry = Telemetry::new()
            .with_sink(CsvSink::create(&csv_path, 4).unwrap())
            .with_sink(JsonlSink::create(&jsonl_path, 4).unwrap());
        let mut written = Vec::new();
        for (t, (d, post, _, _)) in run_single(cfg, &dir, &norms).into_iter().enumerate() {
            let loss = Some(1.0 / (t as f64 + 1.0));
            let record = StepRecord::from_decision("prop", t as u64, &d, post, loss);
            telemetry.record(&record).unwrap();
            written.push(record);
        }
        telemetry.flush().unwrap();
        drop(telemetry);
        let from_csv = read_csv(&csv_path).unwrap();
        let from_jsonl = read_jsonl(&jsonl_path).unwrap();
        prop_assert_eq!(&from_csv, &written);
        prop_assert_eq!(&from_jsonl, &written);
        for r in &from_csv {
            let expected = r.scale_factor * r.pre_norm;
            prop_assert!((r.post_norm - expected).abs() <= 1e-6 * expected.max(1e-12));
        }
    }
}
