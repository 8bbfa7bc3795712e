use serde::{Deserialize, Serialize};

/// A decoding request: `l_in` prefilled context tokens, `out_len` tokens to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Request {
    pub id: u32,
    pub l_in: u32,
    pub out_len: u32,
}

impl Request {
    pub fn new(id: u32, l_in: u32, out_len: u32) -> Self {
        Request { id, l_in, out_len }
    }

    pub fn final_len(&self) -> u32 {
        self.l_in + self.out_len
    }
}
