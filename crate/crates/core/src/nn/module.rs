use std::cell::RefCell;

use exemplar_tensor::Param;

/// Persistent non-trainable state (spectral-norm power-iteration vectors).
pub type Buffer = RefCell<Vec<f64>>;

/// Anything owning parameters. Names are dotted paths, stable across runs, so
/// they double as checkpoint keys.
pub trait Module {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);

    fn visit_buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Buffer)>) {}

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn named_buffers(&self) -> Vec<(String, &Buffer)> {
        let mut out = Vec::new();
        self.visit_buffers("", &mut out);
        out
    }

    fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
