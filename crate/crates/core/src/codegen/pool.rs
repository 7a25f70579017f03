use std::collections::HashMap;

/// Read-only data addressed relative to the pool base register. Every
/// entry starts on a 16-byte boundary and is zero-padded to whole vectors.
#[derive(Debug, Clone, Default)]
pub struct ConstantPool {
    data: Vec<f32>,
    vectors: HashMap<[u32; 4], usize>,
}

impl ConstantPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `values` and returns the byte offset of the entry.
    pub fn push(&mut self, values: &[f32]) -> usize {
        let offset = self.data.len() * 4;
        self.data.extend_from_slice(values);
        let padded = values.len().div_ceil(4) * 4;
        self.data.resize(offset / 4 + padded, 0.0);
        offset
    }

    /// A single vector, shared with any identical vector already present.
    pub fn vector(&mut self, lanes: [f32; 4]) -> usize {
        let key = lanes.map(f32::to_bits);
        if let Some(&offset) = self.vectors.get(&key) {
            return offset;
        }
        let offset = self.push(&lanes);
        self.vectors.insert(key, offset);
        offset
    }

    pub fn splat(&mut self, value: f32) -> usize {
        self.vector([value; 4])
    }

    pub fn splat_bits(&mut self, bits: u32) -> usize {
        self.vector([f32::from_bits(bits); 4])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
