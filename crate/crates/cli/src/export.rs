//! 8-bit Netpbm previews of a latent.

use asg_core::Tensor;

/// Maps one channel plane to 0..=255 by its own min and max. Flat planes map to 0.
fn channel_bytes(t: &Tensor, c: usize) -> Vec<u8> {
    let s = t.shape();
    let plane = &t.data()[c * s.plane()..(c + 1) * s.plane()];
    let finite = plane.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    plane
        .iter()
        .map(|&v| {
            if !v.is_finite() || span <= 0.0 {
                0
            } else {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// Binary PGM for one channel, PPM of the first three channels otherwise.
/// Two channels get a zero blue plane.
pub fn netpbm(t: &Tensor) -> (Vec<u8>, &'static str) {
    let s = t.shape();
    if s.channels == 1 {
        let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
        out.extend(channel_bytes(t, 0));
        return (out, "pgm");
    }
    let planes: Vec<Vec<u8>> = (0..3)
        .map(|c| {
            if c < s.channels {
                channel_bytes(t, c)
            } else {
                vec![0; s.plane()]
            }
        })
        .collect();
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for i in 0..s.plane() {
        out.extend(planes.iter().map(|p| p[i]));
    }
    (out, "ppm")
}
