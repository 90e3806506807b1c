// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::Result;
use crate::trace::{BeliefReadout, LayerActivations};

/// Anything that can finish a forward pass from a layer snapshot.
///
/// Implementations must be re-entrant: interventions call `resume`
/// concurrently from several workers.
pub trait Resume: Sync {
    /// `L_max`.
    fn num_layers(&self) -> usize;

    /// Run blocks `layer+1 ..= L_max` on `activations` and read out.
    fn resume(&self, layer: usize, activations: &LayerActivations) -> Result<BeliefReadout>;
}
