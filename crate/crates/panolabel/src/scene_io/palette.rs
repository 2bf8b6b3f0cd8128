/// Deterministic id→RGB palette via a splitmix64 mix; pure function of the
/// id, stable across runs and platforms. Id 0 (unlabeled) maps to dark gray.
pub fn palette(id: u32) -> [u8; 3] {
    if id == 0 {
        return [40, 40, 40];
    }
    let mut z = (id as u64).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    // keep channels away from pure black so labels stay visible
    [
        64 + (z & 0xbf) as u8,
        64 + ((z >> 8) & 0xbf) as u8,
        64 + ((z >> 16) & 0xbf) as u8,
    ]
}
