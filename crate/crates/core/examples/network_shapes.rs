//! Prints the layer-by-layer tensor shapes of the generator and both
//! critics at full size, then traces a real forward pass at 64×64.

use candle_core::{DType, Device, Tensor};
use reage::discriminator::{image_disc_shapes, video_disc_shapes, ImageDiscConfig, ImageDiscriminator, VideoDiscConfig};
use reage::generator::{generator_shapes, recurrent_block_shapes, trace_to_rows, Generator, GeneratorConfig, RecurrentState, ShapeRow};
use reage::nn::Trace;

fn print(title: &str, rows: &[ShapeRow]) {
    println!("{title}");
    for r in rows {
        println!("  {r}");
    }
    println!();
}

fn main() -> reage::Result<()> {
    let g = GeneratorConfig::default();
    print("recurrent block", &recurrent_block_shapes(&g));
    print("generator (N = 57)", &generator_shapes(&g, 57));
    print("image critic", &image_disc_shapes(&ImageDiscConfig::default(), g.resolution));
    print("video critic", &video_disc_shapes(&VideoDiscConfig::default(), g.resolution));

    // same widths, smaller frames: the traced shapes must match the table
    let small = GeneratorConfig { resolution: 64, ..g };
    let gen = Generator::new(small.clone(), DType::F32)?;
    let masked = Tensor::zeros((1, 5, 64, 64), DType::F32, &Device::Cpu)?;
    let first = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu)?;
    let mut trace = Trace::new();
    gen.step(&masked, &masked, &masked, &RecurrentState::initial(&small, &first)?, Some(&mut trace))?;
    println!("traced block at 64×64 matches table: {}", trace_to_rows(&trace) == recurrent_block_shapes(&small));

    let critic = ImageDiscriminator::new(ImageDiscConfig::default(), DType::F32)?;
    let mut trace = Trace::new();
    critic.forward(&first, &[0.5], Some(&mut trace))?;
    println!("traced image critic at 64×64 matches table: {}", trace_to_rows(&trace) == image_disc_shapes(critic.config(), 64));
    println!("generator parameters: {}", gen.params().parameter_count());
    Ok(())
}
