//! Export of last-layer pooling states for inspection.

use std::io::Write;
use std::path::Path;

use super::QrnnLayer;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Anything that can report its last QRNN layer's states `c_t` (`[T, m]`,
/// before the output gate) for one input sequence.
pub trait HiddenStateSource<T> {
    type Input: ?Sized;

    fn last_layer_states(&self, input: &Self::Input) -> Result<Tensor<T>>;
}

impl<T: Scalar> HiddenStateSource<T> for QrnnLayer<T> {
    type Input = Tensor<T>;

    fn last_layer_states(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, cache) = self.forward_with(input, Default::default())?;
        Ok(cache.states())
    }
}

/// Writes `[T, m]` states as CSV: header `c0,c1,...`, one row per step.
pub fn write_states_csv<T: Scalar>(states: &Tensor<T>, path: &Path) -> Result<()> {
    let &[steps, m] = states.shape() else {
        return Err(Error::Dimension(format!("expected [T, m] states, got {:?}", states.shape())));
    };
    let mut out = String::new();
    let header: Vec<String> = (0..m).map(|j| format!("c{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..steps {
        let row: Vec<String> = states.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `model` over `input` and dumps the last layer's states to `path`.
pub fn dump_hidden_states<T: Scalar, M: HiddenStateSource<T> + ?Sized>(
    model: &M,
    input: &M::Input,
    path: &Path,
) -> Result<()> {
    write_states_csv(&model.last_layer_states(input)?, path)
}
