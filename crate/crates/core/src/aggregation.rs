use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayeredModel, ParamMask};

/// Full-model broadcast period: every `h`-th round the server sends complete
/// models instead of mask-restricted ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastPolicy {
    pub h: usize,
}

impl BroadcastPolicy {
    pub fn new(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("broadcast period h must be >= 1".into()));
        }
        Ok(BroadcastPolicy { h })
    }

    pub fn is_full_round(&self, round: usize) -> bool {
        round % self.h == 0
    }
}

/// One client's contribution to the round: model and mask in global
/// coordinates plus its aggregation weight (sample count, or 1 under the
/// equal-weights switch).
#[derive(Debug, Clone)]
pub struct Upload {
    pub model: LayeredModel,
    pub mask: ParamMask,
    pub weight: f64,
}

/// Masked weighted aggregation. Coordinates nobody uploaded keep the
/// previous global value. Uploads must arrive in ascending client order;
/// the reduction order is exactly the slice order, making sums reproducible.
pub fn aggregate(uploads: &[Upload], previous: &LayeredModel) -> Result<LayeredModel> {
    if uploads.is_empty() {
        return Err(Error::EmptyUploads);
    }
    for up in uploads {
        if !up.model.same_shape(previous) {
            return Err(Error::ShapeMismatch(
                "upload not in global coordinates".into(),
            ));
        }
        if !(up.weight > 0.0) {
            return Err(Error::Range("aggregation weight must be > 0".into()));
        }
    }
    let mut out = previous.clone();
    let n_layers = previous.layers.len();
    for l in 0..n_layers {
        let n_w = previous.layers[l].weights.len();
        let n_b = previous.layers[l].bias.len();
        for j in 0..n_w + n_b {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut contributors = 0usize;
            let mut single = 0.0;
            for up in uploads {
                let (bit, value) = if j < n_w {
                    (up.mask.layers[l].weights[j], up.model.layers[l].weights[j])
                } else {
                    (up.mask.layers[l].bias[j - n_w], up.model.layers[l].bias[j - n_w])
                };
                if bit {
                    num += up.weight * value;
                    den += up.weight;
                    contributors += 1;
                    single = value;
                }
            }
            // A lone contributor passes through exactly; w*v/w would round.
            let new = match contributors {
                0 => continue,
                1 => single,
                _ => num / den,
            };
            if j < n_w {
                out.layers[l].weights[j] = new;
            } else {
                out.layers[l].bias[j - n_w] = new;
            }
        }
    }
    Ok(out)
}

/// What a client receives after aggregation.
#[derive(Debug, Clone)]
pub struct BroadcastPayload {
    pub full: bool,
    /// Global-coordinate model; zero outside the mask on sparse rounds.
    pub model: LayeredModel,
    /// Payload size in parameters, for download-time accounting: the mask
    /// popcount on sparse rounds, the client's sub-model size on full ones.
    pub size_params: usize,
}

/// Server-side payload formation for one client at round `t >= 1`.
pub fn broadcast(
    global: &LayeredModel,
    mask: &ParamMask,
    round: usize,
    policy: BroadcastPolicy,
    sub_params: usize,
) -> BroadcastPayload {
    if policy.is_full_round(round) {
        return BroadcastPayload {
            full: true,
            model: global.clone(),
            size_params: sub_params,
        };
    }
    let mut model = global.clone();
    for v in model.iter_params_mut().zip(mask.iter_bits()) {
        if !v.1 {
            *v.0 = 0.0;
        }
    }
    BroadcastPayload {
        full: false,
        model,
        size_params: mask.count_ones(),
    }
}

/// Client-side reconciliation in the client's own coordinates.
/// Sparse: keep received values inside the mask, own values outside.
/// Full: adopt the received model wholesale.
pub fn local_update(
    own: &LayeredModel,
    received: &LayeredModel,
    mask: &ParamMask,
    full: bool,
) -> Result<LayeredModel> {
    if !own.same_shape(received) {
        return Err(Error::ShapeMismatch(
            "received model does not match client shape".into(),
        ));
    }
    if full {
        return Ok(received.clone());
    }
    let mut out = own.clone();
    for ((o, r), bit) in out
        .iter_params_mut()
        .zip(received.iter_params())
        .zip(mask.iter_bits())
    {
        if bit {
            *o = r;
        }
    }
    Ok(out)
}
