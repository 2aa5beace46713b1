//! Byte accounting for a one-shot encrypted upload versus iterative
//! federated learning.
//!
//! The model is deliberately simple and every term is exposed:
//!
//! * one-shot: every client uploads its images once
//!   (`m * images * bytes_per_image`), then downloads the final model once
//!   (`m * model_bytes`);
//! * federated: each of `rounds` rounds sends the model down to and back up
//!   from `k = ceil(participation * m)` clients (`rounds * k * 2 * model_bytes`),
//!   plus the same final distribution `m * model_bytes`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub m_clients: u64,
    pub images_per_client: u64,
    pub bytes_per_image: u64,
    pub model_bytes: u64,
    pub fl_rounds: u64,
    pub fl_participation: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::format("cost parameters", r.to_string()));
        if self.m_clients == 0 || self.images_per_client == 0 || self.bytes_per_image == 0 || self.model_bytes == 0 {
            return bad("clients, images, image size and model size must be positive");
        }
        if !(self.fl_participation > 0.0 && self.fl_participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        Ok(())
    }

    /// Clients taking part in each federated round.
    pub fn participants(&self) -> u64 {
        let x = self.fl_participation * self.m_clients as f64;
        let r = x.round();
        let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
        (k as u64).clamp(1, self.m_clients)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionBytes {
    pub client_to_server: u64,
    pub server_to_client: u64,
}

impl DirectionBytes {
    pub fn total(&self) -> u64 {
        self.client_to_server + self.server_to_client
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OneShotCheaper,
    FederatedCheaper,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: CostParams,
    pub one_shot_upload_bytes: u64,
    pub one_shot_model_bytes: u64,
    pub one_shot_total_bytes: u64,
    pub fl_total_bytes: u64,
    pub one_shot: DirectionBytes,
    pub federated: DirectionBytes,
    pub fl_participants_per_round: u64,
    pub regime: Regime,
    /// Model size above which the one-shot upload is cheaper; `None` when
    /// there are no federated rounds.
    pub crossover_model_bytes: Option<f64>,
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b)
        .ok_or_else(|| Error::format("cost parameters", "byte count overflows u64"))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b)
        .ok_or_else(|| Error::format("cost parameters", "byte count overflows u64"))
}

pub fn cost_report(p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    let k = p.participants();
    let upload = mul(mul(p.m_clients, p.images_per_client)?, p.bytes_per_image)?;
    let final_model = mul(p.m_clients, p.model_bytes)?;
    let per_direction_rounds = mul(mul(p.fl_rounds, k)?, p.model_bytes)?;

    let one_shot = DirectionBytes {
        client_to_server: upload,
        server_to_client: final_model,
    };
    let federated = DirectionBytes {
        client_to_server: per_direction_rounds,
        server_to_client: add(per_direction_rounds, final_model)?,
    };
    let one_shot_total = add(one_shot.client_to_server, one_shot.server_to_client)?;
    let fl_total = add(federated.client_to_server, federated.server_to_client)?;
    let regime = match one_shot_total.cmp(&fl_total) {
        std::cmp::Ordering::Less => Regime::OneShotCheaper,
        std::cmp::Ordering::Greater => Regime::FederatedCheaper,
        std::cmp::Ordering::Equal => Regime::Equal,
    };
    let crossover = (p.fl_rounds > 0).then(|| upload as f64 / (2.0 * p.fl_rounds as f64 * k as f64));
    Ok(CostReport {
        params: *p,
        one_shot_upload_bytes: upload,
        one_shot_model_bytes: final_model,
        one_shot_total_bytes: one_shot_total,
        fl_total_bytes: fl_total,
        one_shot,
        federated,
        fl_participants_per_round: k,
        regime,
        crossover_model_bytes: crossover,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(model_bytes: u64, rounds: u64) -> CostParams {
        CostParams {
            m_clients: 5,
            images_per_client: 10_000,
            bytes_per_image: 150_528,
            model_bytes,
            fl_rounds: rounds,
            fl_participation: 1.0,
        }
    }

    #[test]
    fn no_rounds_degenerates_to_final_distribution() {
        let r = cost_report(&params(1000, 0)).unwrap();
        assert_eq!(r.fl_total_bytes, 5 * 1000);
        assert_eq!(r.fl_total_bytes, r.one_shot_model_bytes);
        assert_eq!(r.crossover_model_bytes, None);
    }

    #[test]
    fn vit_base_example() {
        let r = cost_report(&params(330_000_000, 100)).unwrap();
        assert_eq!(r.one_shot_upload_bytes, 7_526_400_000);
        assert_eq!(r.fl_total_bytes, 331_650_000_000);
        assert_eq!(r.regime, Regime::OneShotCheaper);
    }

    #[test]
    fn breakdowns_sum() {
        for m in [1u64, 7, 1 << 20] {
            let r = cost_report(&params(m, 13)).unwrap();
            assert_eq!(r.one_shot.total(), r.one_shot_total_bytes);
            assert_eq!(r.federated.total(), r.fl_total_bytes);
            assert_eq!(r.one_shot_upload_bytes + r.one_shot_model_bytes, r.one_shot_total_bytes);
        }
    }

    #[test]
    fn partial_participation_rounds_up() {
        let p = CostParams {
            fl_participation: 0.3,
            ..params(10, 1)
        };
        assert_eq!(p.participants(), 2);
        let p = CostParams {
            m_clients: 10,
            fl_participation: 0.3,
            ..params(10, 1)
        };
        assert_eq!(p.participants(), 3);
    }

    #[test]
    fn invalid_params() {
        assert!(cost_report(&CostParams { m_clients: 0, ..params(1, 1) }).is_err());
        assert!(cost_report(&CostParams { fl_participation: 0.0, ..params(1, 1) }).is_err());
        assert!(cost_report(&CostParams { fl_participation: 1.5, ..params(1, 1) }).is_err());
        assert!(cost_report(&CostParams { model_bytes: u64::MAX, ..params(1, 100) }).is_err());
    }
}
