mod oracle;

use cdprompt::metrics;

const TOL: f64 = 1e-9;

fn close(name: &str, got: f64, want: f64) {
    assert!((got - want).abs() <= TOL, "{name}: {got} vs oracle {want}");
}

#[test]
fn fixture_matches_brute_force() {
    let (h, r) = oracle::fixture();
    assert_eq!(h.len(), 25);
    for n in [1, 2, 4] {
        close(&format!("BLEU-{n}"), metrics::bleu(&h, &r, n).unwrap(), oracle::bleu(&h, &r, n));
        close(&format!("NIST-{n}"), metrics::nist(&h, &r, n).unwrap(), oracle::nist(&h, &r, n));
    }
    close("ROUGE-L", metrics::rouge_l(&h, &r).unwrap(), oracle::rouge_l(&h, &r));
    close("METEOR", metrics::meteor(&h, &r).unwrap(), oracle::meteor(&h, &r));
    for n in [1, 2] {
        close(&format!("Dist-{n}"), metrics::dist_n(&h, n), oracle::dist(&h, n));
    }
    close("Entropy-4", metrics::entropy_n(&h, 4), oracle::entropy(&h, 4));
}

#[test]
fn fixture_is_not_degenerate() {
    let (h, r) = oracle::fixture();
    assert!(oracle::bleu(&h, &r, 4) > 0.0);
    assert!(oracle::nist(&h, &r, 4) > 0.0);
    assert!(oracle::entropy(&h, 4) > 0.0);
}

#[test]
fn per_sample_meteor_matches_exhaustive_alignment() {
    let (h, r) = oracle::fixture();
    for (i, (x, rs)) in h.iter().zip(&r).enumerate() {
        close(&format!("METEOR sample {i}"), metrics::meteor_sentence(x, rs), oracle::meteor_sentence(x, rs));
        for y in rs {
            assert_eq!(metrics::lcs_len(x, y), oracle::lcs(x, y), "LCS sample {i}");
        }
    }
}
