use crate::error::{Error, Result};
use crate::model::glorot_uniform;
use crate::tensor::{NodeId, ParamStore, Rng, Session, Tensor};

/// Graph nodes of one GRU update, all `[batch x hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct GruState {
    pub r: NodeId,
    pub z: NodeId,
    pub h_tilde: NodeId,
    pub h: NodeId,
}

pub(crate) fn init_direction(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
    for gate in ["r", "z", "h"] {
        store.insert(
            format!("{prefix}.w_{gate}"),
            glorot_uniform(&[hidden, input + hidden], input + hidden, hidden, rng),
            true,
        );
        store.insert(format!("{prefix}.b_{gate}"), Tensor::zeros([hidden]), true);
    }
}

fn gate(s: &mut Session, prefix: &str, gate: &str, x: NodeId) -> Result<NodeId> {
    let w = s.param(&format!("{prefix}.w_{gate}"))?;
    let b = s.param(&format!("{prefix}.b_{gate}"))?;
    s.graph.linear(x, w, Some(b))
}

/// One step with weights `{prefix}.w_r|w_z|w_h` (`[hidden x (input + hidden)]`)
/// and biases `{prefix}.b_r|b_z|b_h`:
///
/// ```text
/// r  = sigmoid(W_r [v, h] + b_r)
/// z  = sigmoid(W_z [v, h] + b_z)
/// h~ = tanh(W_h [v, r * h] + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_step(s: &mut Session, prefix: &str, v: NodeId, h_prev: NodeId) -> Result<GruState> {
    let (sv, sh) = (s.graph.shape(v).to_vec(), s.graph.shape(h_prev).to_vec());
    if sv.len() != 2 || sh.len() != 2 || sv[0] != sh[0] {
        return Err(Error::dim(format!("gru_step: input {sv:?} with hidden {sh:?}")));
    }
    let vh = s.graph.concat(&[v, h_prev], 1)?;
    let r = gate(s, prefix, "r", vh)?;
    let r = s.graph.sigmoid(r);
    let z = gate(s, prefix, "z", vh)?;
    let z = s.graph.sigmoid(z);
    let rh = s.graph.mul(r, h_prev)?;
    let vrh = s.graph.concat(&[v, rh], 1)?;
    let h_tilde = gate(s, prefix, "h", vrh)?;
    let h_tilde = s.graph.tanh(h_tilde);
    let keep = s.graph.affine(z, -1.0, 1.0);
    let old = s.graph.mul(keep, h_prev)?;
    let new = s.graph.mul(z, h_tilde)?;
    let h = s.graph.add(old, new)?;
    Ok(GruState { r, z, h_tilde, h })
}

/// Runs `{prefix}.fwd` over `seq` in order and `{prefix}.bwd` in reverse, both
/// from a zero state, and returns `l_t = [fwd_t, bwd_t]` for each step.
pub fn bigru_forward(s: &mut Session, prefix: &str, seq: &[NodeId], hidden: usize) -> Result<Vec<NodeId>> {
    let first = seq.first().ok_or_else(|| Error::dim("bigru over an empty sequence"))?;
    let batch = s.graph.shape(*first)[0];
    let zero = s.input(Tensor::zeros([batch, hidden]));
    let run = |s: &mut Session, dir: &str, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, NodeId)>> {
        let mut h = zero;
        let mut out = Vec::with_capacity(seq.len());
        for t in order {
            h = gru_step(s, &format!("{prefix}.{dir}"), seq[t], h)?.h;
            out.push((t, h));
        }
        Ok(out)
    };
    let fwd = run(s, "fwd", &mut (0..seq.len()))?;
    let mut bwd = run(s, "bwd", &mut (0..seq.len()).rev())?;
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(&(_, f), &(_, b))| s.graph.concat(&[f, b], 1))
        .collect()
}
