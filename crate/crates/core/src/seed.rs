/// Derives an independent stream seed from a master seed and a path of
/// indices (splitmix64 finalizer applied per component).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = mix(master ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        s = mix(s ^ mix(p.wrapping_add(0xd1b5_4a32_d192_ed03)));
    }
    s
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
