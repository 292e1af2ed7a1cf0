//! Simulated federated training with sample-weighted parameter averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{crop, resample, Eye, VolumeRecord};
use crate::net::ModelState;
use crate::train::{evaluate, train_stage1, DataSplits, TrainConfig};
use crate::{Error, Real, Result, Tensor};

pub const HARMONIZED_DIMS: [usize; 3] = [64, 128, 64];

/// Keeps the optic-nerve-head side of the width axis and resizes to
/// `target`. The left eye's disc sits in the first half, the right eye's
/// in the last; an unknown eye falls back to the first half.
pub fn harmonize_volume(record: &VolumeRecord, onh_fraction: f64, target: [usize; 3]) -> Result<VolumeRecord> {
    let [d, h, w] = record.dims();
    if !(onh_fraction > 0.0 && onh_fraction <= 1.0) {
        return Err(Error::Config(format!("ONH fraction must lie in (0, 1], got {onh_fraction}")));
    }
    let keep = (onh_fraction * w as f64).round() as usize;
    if w < 2 && onh_fraction < 1.0 || keep == 0 {
        return Err(Error::Data(format!(
            "cannot keep {onh_fraction} of width {w} in {}",
            record.patient_id
        )));
    }
    let start = match record.eye {
        Eye::Right => w - keep,
        Eye::Left => 0,
        Eye::Unknown => {
            if keep < w {
                log::warn!("{}: unknown eye, keeping the first width half", record.patient_id);
            }
            0
        }
    };
    let cropped = crop(&record.values, [0, 0, start], [d, h, keep])?;
    Ok(VolumeRecord {
        values: resample(&cropped, target)?,
        ..record.clone()
    })
}

#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub client_id: String,
    pub model: ModelState<T>,
    pub data: DataSplits,
}

impl<T> ClientState<T> {
    pub fn sample_count(&self) -> usize {
        self.data.train.len()
    }
}

/// Global parameters as the sample-weighted mean of client parameters.
/// Clients are reduced in `client_id` order, so the result does not depend
/// on how they are listed. Optimizer moments of the result are zero.
pub fn fedavg<T: Real>(clients: &[(&str, usize, &ModelState<T>)]) -> Result<ModelState<T>> {
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by(|&a, &b| clients[a].0.cmp(clients[b].0));
    let first = clients
        .get(*order.first().ok_or_else(|| Error::Config("federated averaging needs a client".into()))?)
        .expect("index from order")
        .2;
    let total: usize = clients.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::Data("clients hold no training samples".into()));
    }
    for (id, _, m) in clients {
        if m.spec != first.spec {
            return Err(Error::IncongruentClients(format!("architecture of client {id}")));
        }
        for ((na, a), (nb, b)) in m.params.iter().zip(&first.params) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::IncongruentClients(na.clone()));
            }
        }
    }
    let mut global = first.clone();
    let mut names: Vec<usize> = (0..global.params.len()).collect();
    names.sort_by(|&a, &b| global.params[a].0.cmp(&global.params[b].0));
    for p in names {
        let mut acc = vec![0.0f64; global.params[p].1.numel()];
        for &c in &order {
            let (_, n, m) = clients[c];
            for (a, v) in acc.iter_mut().zip(m.params[p].1.data()) {
                *a += n as f64 * v.to_f64().unwrap();
            }
        }
        let shape = global.params[p].1.shape().to_vec();
        global.params[p].1 = Tensor::new(&shape, acc.iter().map(|a| T::lit(a / total as f64)).collect())?;
    }
    global.optimizer.reset();
    Ok(global)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 5,
            local_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub client: String,
    pub local_loss: f64,
    /// Global model on the union of client validation sets.
    pub global_val_auroc: Option<f64>,
}

/// Broadcast, local training, averaging. Returns the new global model and
/// one log row per client.
pub fn fedavg_round<T: Real>(
    global: &ModelState<T>,
    clients: &mut [ClientState<T>],
    round: usize,
    local_epochs: usize,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, Vec<RoundLog>)> {
    let local_cfg = TrainConfig {
        epochs: local_epochs,
        patience: local_epochs.max(1),
        ..cfg.clone()
    };
    let mut losses = Vec::with_capacity(clients.len());
    for (k, c) in clients.iter_mut().enumerate() {
        c.model = global.clone();
        c.model.optimizer.reset();
        let out = train_stage1(&mut c.model, &c.data, &local_cfg, round * 1000 + k)?;
        losses.push(out.history.last().map_or(f64::NAN, |h| h.train.combined));
    }
    let refs: Vec<(&str, usize, &ModelState<T>)> = clients
        .iter()
        .map(|c| (c.client_id.as_str(), c.sample_count(), &c.model))
        .collect();
    let mut next = fedavg(&refs)?;
    next.epoch = global.epoch + local_epochs as u64;
    let val: Vec<VolumeRecord> = clients.iter().flat_map(|c| c.data.val.iter().cloned()).collect();
    let auroc = evaluate(&mut next, &val, cfg.threshold, cfg.batch_size, round, cfg.seed)?.auroc;
    let log = clients
        .iter()
        .zip(losses)
        .map(|(c, local_loss)| RoundLog {
            round,
            client: c.client_id.clone(),
            local_loss,
            global_val_auroc: auroc,
        })
        .collect();
    Ok((next, log))
}

pub fn run_fedavg<T: Real>(
    init: ModelState<T>,
    clients: &mut [ClientState<T>],
    fed: &FedConfig,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, Vec<RoundLog>)> {
    let mut global = init;
    let mut log = Vec::new();
    for round in 1..=fed.rounds {
        let (next, rows) = fedavg_round(&global, clients, round, fed.local_epochs, cfg)?;
        global = next;
        log.extend(rows);
    }
    Ok((global, log))
}

pub fn write_round_log(rows: &[RoundLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["round", "client", "local_loss", "global_val_auroc"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client.clone(),
            r.local_loss.to_string(),
            r.global_val_auroc.map_or(String::new(), |a| a.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
