//! Reconstruction error of invert → denoise for each fixture and step count.

use eve_core::attention::AttentionMode;
use eve_core::backend::ToyBackend;
use eve_core::pipeline::reconstruct;
use eve_core::schedule::{BetaSchedule, NoiseSchedule};
use eve_core::synthetic::Fixture;

fn main() -> eve_core::Result<()> {
    let backend = ToyBackend::default();
    for fixture in Fixture::ALL {
        let frames = fixture.clip(4, 64);
        let errors = [10, 25, 50]
            .iter()
            .map(|&t| {
                let sched = NoiseSchedule::new(1000, t, &BetaSchedule::toy_default())?;
                Ok(reconstruct(&backend, &frames, &sched, AttentionMode::Faa, None)?.relative_error)
            })
            .collect::<eve_core::Result<Vec<_>>>()?;
        println!("{:<14} {errors:.4?}", fixture.name());
    }
    Ok(())
}
