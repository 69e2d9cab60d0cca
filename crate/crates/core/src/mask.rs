use crate::error::{Error, Result};

/// Per-pixel class ids of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}×{width} needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Mask { height, width, data: vec![id; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}
