use diseg_web::{attention_view, latency_view, marginals_view};

#[test]
fn attention_rows_are_distributions() {
    let v = attention_view(&[0.1, 0.9, 0.3, 0.7]).unwrap();
    for m in [&v.gamma, &v.hard] {
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(v.decisions, vec![false, true, false, true]);
    assert!((v.beta[0][1] - 0.9).abs() < 1e-12);
    assert!((v.beta[0][2] - 0.9 * 0.1).abs() < 1e-12);
}

#[test]
fn binary_probabilities_give_hard_attention() {
    let v = attention_view(&[0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    for (g, h) in v.gamma.iter().flatten().zip(v.hard.iter().flatten()) {
        assert!((g - h).abs() < 1e-12);
    }
    // Frame 1 sees frames 1-2 only, frame 3 sees everything up to frame 5.
    assert_eq!(v.hard[0], vec![0.5, 0.5, 0.0, 0.0, 0.0]);
    assert!(v.hard[2].iter().all(|&w| (w - 0.2).abs() < 1e-12));
}

#[test]
fn marginal_rows_sum_to_one() {
    let v = marginals_view(&[0.5, 0.5, 0.5], 2, false).unwrap();
    assert_eq!(v.m.len(), 3);
    for row in &v.m {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(v.m[0], vec![1.0, 0.0]);
    assert_eq!(v.m[1], vec![0.5, 0.5]);
    assert!(v.expected_index.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn latency_of_hand_trace() {
    let v = latency_view(&[false, true, false, true], 1, 2, 40.0).unwrap();
    assert_eq!(v.frames_read, vec![2, 4]);
    assert_eq!(v.tau_ms, vec![80.0, 160.0]);
    let offline = latency_view(&[false, true, false, true], 0, 2, 40.0).unwrap();
    assert_eq!(offline.tau_ms, vec![160.0, 160.0]);
    assert_eq!(offline.latency.unwrap().al, 160.0);
}

#[test]
fn bad_inputs_are_reported() {
    assert!(attention_view(&[]).is_err());
    assert!(attention_view(&[1.5]).unwrap_err().contains("1.5"));
    assert!(marginals_view(&[0.5], 0, false).is_err());
    assert!(latency_view(&[], 1, 1, 40.0).is_err());
    assert!(latency_view(&[true], 1, 1, 0.0).is_err());
}
