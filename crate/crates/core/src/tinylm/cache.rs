/// Per-layer keys and values of one sequence, stored as attention reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d: usize,
    max_seq: usize,
    keys: Vec<Vec<f32>>,
    vals: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(n_layers: usize, d: usize, max_seq: usize) -> Self {
        Self {
            d,
            max_seq,
            keys: vec![Vec::with_capacity(max_seq * d); n_layers],
            vals: vec![Vec::with_capacity(max_seq * d); n_layers],
        }
    }

    /// Filled positions.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_seq
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn vals(&self, layer: usize) -> &[f32] {
        &self.vals[layer]
    }

    pub(crate) fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        self.keys[layer].extend_from_slice(k);
        self.vals[layer].extend_from_slice(v);
    }
}
