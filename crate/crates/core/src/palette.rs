/// Colour for index `i` in the standard VOC label palette.
pub fn color(i: u8) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut id = i;
    for shift in (0..8).rev() {
        for (ch, out) in c.iter_mut().enumerate() {
            *out |= ((id >> ch) & 1) << shift;
        }
        id >>= 3;
    }
    c
}

/// The full 256-entry palette, flattened RGB.
pub fn table() -> Vec<u8> {
    (0..=255u8).flat_map(color).collect()
}
