//! Independent oracles and data generators shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semitrans::SurvivalSample;

/// Plain right-censored data.
pub struct Data {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub z: Vec<Vec<f64>>,
}

impl Data {
    pub fn sample(&self) -> SurvivalSample {
        SurvivalSample::from_columns(&self.time, &self.event, self.z.clone()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }
}

/// Proportional hazards data with baseline hazard 1, covariates uniform on
/// [-1, 1] and exponential censoring.
pub fn ph_data(seed: u64, n: usize, theta: &[f64], censor_rate: f64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Data { time: Vec::new(), event: Vec::new(), z: Vec::new() };
    for _ in 0..n {
        let z: Vec<f64> = theta.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
        let t = -(1.0 - rng.random::<f64>()).ln() / eta.exp();
        let c = -(1.0 - rng.random::<f64>()).ln() / censor_rate;
        d.time.push(t.min(c));
        d.event.push(t <= c);
        d.z.push(z);
    }
    d
}

/// Proportional odds data with `Gamma_0(t) = t`: `T = U / (1 - U) e^{-eta}`,
/// uniform censoring on [0, c].
pub fn po_data(seed: u64, n: usize, theta: &[f64], c: f64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Data { time: Vec::new(), event: Vec::new(), z: Vec::new() };
    for _ in 0..n {
        let z: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(j, _)| if j == 0 { f64::from(rng.random::<bool>() as u8) } else { rng.random_range(-1.0..1.0) })
            .collect();
        let eta: f64 = z.iter().zip(theta).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        let t = u / (1.0 - u) * (-eta).exp();
        let cc = c * rng.random::<f64>();
        d.time.push(t.min(cc));
        d.event.push(t <= cc);
        d.z.push(z);
    }
    d
}

/// Newton-Raphson on the Cox log partial likelihood with Breslow ties.
pub fn cox_newton(data: &Data) -> Vec<f64> {
    let d = data.z[0].len();
    let mut beta = DVector::<f64>::zeros(d);
    for _ in 0..100 {
        let (g, h) = cox_gradient_hessian(data, beta.as_slice());
        let step = h.lu().solve(&g).expect("Cox information is singular");
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta.as_slice().to_vec()
}

fn cox_gradient_hessian(data: &Data, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = beta.len();
    let mut grad = DVector::zeros(d);
    let mut info = DMatrix::zeros(d, d);
    let w: Vec<f64> = data.z.iter().map(|z| z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
    for i in 0..data.len() {
        if !data.event[i] {
            continue;
        }
        let ti = data.time[i];
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(d);
        let mut s2 = DMatrix::zeros(d, d);
        for j in 0..data.len() {
            if data.time[j] >= ti {
                let zj = DVector::from_column_slice(&data.z[j]);
                s0 += w[j];
                s1 += &zj * w[j];
                s2 += &zj * zj.transpose() * w[j];
            }
        }
        let zi = DVector::from_column_slice(&data.z[i]);
        let mean = &s1 / s0;
        grad += zi - &mean;
        info += s2 / s0 - &mean * mean.transpose();
    }
    (grad, info)
}

/// Breslow cumulative baseline hazard at each distinct event time.
pub fn breslow(data: &Data, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut times: Vec<f64> = (0..data.len()).filter(|&i| data.event[i]).map(|i| data.time[i]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let w: Vec<f64> = data.z.iter().map(|z| z.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
    let mut acc = 0.0;
    let values = times
        .iter()
        .map(|&t| {
            let deaths = (0..data.len()).filter(|&i| data.event[i] && data.time[i] == t).count() as f64;
            let risk: f64 = (0..data.len()).filter(|&i| data.time[i] >= t).map(|i| w[i]).sum();
            acc += deaths / risk;
            acc
        })
        .collect();
    (times, values)
}

/// Nelson-Aalen estimator at each distinct event time.
pub fn nelson_aalen(data: &Data) -> (Vec<f64>, Vec<f64>) {
    let zero = vec![0.0; data.z[0].len()];
    breslow(data, &zero)
}

/// Kaplan-Meier median.
pub fn km_median(time: &[f64], event: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..time.len()).collect();
    idx.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut s = 1.0;
    let mut k = 0;
    while k < idx.len() {
        let t = time[idx[k]];
        let at_risk = idx.len() - k;
        let mut deaths = 0;
        while k < idx.len() && time[idx[k]] == t {
            deaths += usize::from(event[idx[k]]);
            k += 1;
        }
        s *= 1.0 - deaths as f64 / at_risk as f64;
        if s <= 0.5 {
            return Some(t);
        }
    }
    None
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}
