#![no_main]

use falconfuse_core::checkpoint::decode_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = decode_checkpoint(data) else { return };
    // Building the model allocates every parameter; skip configs that are
    // valid but too large to instantiate on each iteration.
    if ckpt.config.validate().is_ok() && ckpt.config.param_count().is_ok_and(|n| n <= 1_000_000) {
        let _ = ckpt.into_model::<f32>(&ckpt.config);
    }
});
