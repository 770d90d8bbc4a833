//! Training-time augmentation: random rotation plus horizontal/vertical flips.
//!
//! Cell orientation carries no label information, so rotation angles are drawn
//! uniformly from the full circle; the revealed corners are filled with the
//! image's border median.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdf_core::data::Label;
use sdf_core::imagebuf::ImageBuf;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Rotation angle in degrees, uniform in [-180, 180].
    pub angle_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        angle_deg: 0.0,
        flip_h: false,
        flip_v: false,
    };

    pub fn sample(rng: &mut ChaCha8Rng) -> AugmentDraw {
        AugmentDraw {
            angle_deg: rng.gen_range(-180.0..180.0),
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        }
    }

    pub fn apply(&self, image: &ImageBuf) -> ImageBuf {
        let mut out = if self.angle_deg != 0.0 {
            let fill = image.border_median();
            image.rotate_bilinear((self.angle_deg.to_radians()) as f32, fill)
        } else {
            image.clone()
        };
        if self.flip_h {
            out = out.flip_horizontal();
        }
        if self.flip_v {
            out = out.flip_vertical();
        }
        out
    }
}

/// Apply an independent random draw; the label is passed through untouched.
pub fn augment(image: &ImageBuf, label: Label, rng: &mut ChaCha8Rng) -> (ImageBuf, Label) {
    (AugmentDraw::sample(rng).apply(image), label)
}
