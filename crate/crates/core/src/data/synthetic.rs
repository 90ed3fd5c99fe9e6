//! Seeded sine-plus-trend series for demos, tests and benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::RawSeries;
use crate::tensor::Tensor;

/// Two variables: a daily sine over a rising trend, and a slower cosine over
/// a falling one, each with Gaussian noise of standard deviation `noise`.
pub fn sine_trend(n: usize, noise: f64, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite standard deviation");
    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(2 * n);
    for t in 0..n {
        let t_f = t as f64;
        data.push((tau * t_f / 24.0).sin() + 0.002 * t_f + jitter.sample(&mut rng));
        data.push(0.8 * (tau * t_f / 60.0).cos() - 0.001 * t_f + jitter.sample(&mut rng));
    }
    RawSeries {
        timestamps: (0..n).map(hour_stamp).collect(),
        values: Tensor::new(vec![n, 2], data).expect("n x 2 values"),
        variable_names: vec!["seasonal".into(), "slow".into()],
    }
}

/// `YYYY-MM-DD HH:00:00` for hour `h` after 2020-01-01, in a 360-day calendar
/// of 30-day months. Sorting the strings sorts the hours.
fn hour_stamp(h: usize) -> String {
    let (day, hour) = (h / 24, h % 24);
    let (year, rest) = (2020 + day / 360, day % 360);
    format!("{year:04}-{:02}-{:02} {hour:02}:00:00", rest / 30 + 1, rest % 30 + 1)
}

impl RawSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date");
        for name in &self.variable_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (r, ts) in self.timestamps.iter().enumerate() {
            out.push_str(ts);
            for v in self.values.row(r) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
