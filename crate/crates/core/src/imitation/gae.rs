use crate::error::{invalid, Error, Result};

/// Per-step advantages and value-regression targets of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSeries {
    pub advantages: Vec<f64>,
    /// Discounted reward-to-go from each step.
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation by the backward recursion
/// `A_t = d_t + g*l*A_{t+1}`, `d_t = r_t + g*V(s_{t+1}) - V(s_t)`.
/// `values` holds one entry per state, the terminal one included.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<AdvantageSeries> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Shape {
            context: "gae values",
            expected: rewards.len() + 1,
            got: values.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("gamma={gamma} and lambda={lambda} must lie in [0, 1]")));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    let mut ret = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        ret = rewards[t] + gamma * ret;
        advantages[t] = acc;
        returns[t] = ret;
    }
    if advantages.iter().chain(&returns).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("advantages"));
    }
    Ok(AdvantageSeries { advantages, returns })
}
