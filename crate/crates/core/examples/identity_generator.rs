//! With its last convolution zeroed the generator returns its input
//! exactly, for any pair of ages.

use candle_core::DType;
use reage::datamodel::{AgeValue, Frame, VideoClip};
use reage::generator::{Generator, GeneratorConfig};
use reage::synthpipeline::{IdentitySeed, ProceduralBackend, StillBackend};

fn main() -> reage::Result<()> {
    let still = ProceduralBackend.synthesize(IdentitySeed(7), AgeValue::new(30.0)?, 64)?;
    let frames: Vec<Frame> = (0..5).map(|_| still.frame.clone()).collect();
    let clip = VideoClip::new("demo", frames)?;

    let g = Generator::new(GeneratorConfig::desk(), DType::F32)?;
    let random = g.generate_video(&clip, AgeValue::new(30.0)?, AgeValue::new(80.0)?, 1)?;
    println!("random init, max |out - in| = {:.4}", random.frames()[2].max_abs_diff(&clip.frames()[2])?);

    g.zero_output_layer()?;
    let mut worst = 0.0f32;
    for (a, b) in [(30.0, 80.0), (30.0, 18.0)] {
        let out = g.generate_video(&clip, AgeValue::new(a)?, AgeValue::new(b)?, 1)?;
        for (x, y) in clip.frames().iter().zip(out.frames()) {
            worst = worst.max(x.max_abs_diff(y)?);
        }
    }
    println!("zeroed output layer, max |out - in| = {worst}");
    Ok(())
}
