//! Keyframe selection written out as the three nested loops of the original
//! algorithm, returning frame indices rather than offsets.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use star_core::keyframes::KeyframeConfig;

pub fn unrolled(t: usize, cfg: &KeyframeConfig) -> Vec<usize> {
    let (lc, lp, lq, lr) = (cfg.closeness, cfg.period, cfg.trend, cfg.sub_fragment);
    let (p, q) = (cfg.period_span, cfg.trend_span);
    let mut queue = Vec::new();
    for i in 1..=lc {
        queue.push(t - i);
    }
    for i in 1..=lp {
        for r in 0..=lr {
            queue.push(t - i * p - r);
        }
    }
    for i in 1..=lq {
        for r in 0..=lr {
            queue.push(t - i * q - r);
        }
    }
    queue
}

pub fn random_config(rng: &mut ChaCha8Rng) -> KeyframeConfig {
    let ipd = rng.gen_range(2..60);
    KeyframeConfig::daily_weekly(
        rng.gen_range(1..6),
        rng.gen_range(0..4),
        rng.gen_range(0..3),
        rng.gen_range(0..4),
        ipd,
    )
}
