//! Write a weight archive to disk, read it back, and show that corrupted
//! bytes are rejected with a specific error.

use psconv::io::{read_archive, DType, NamedTensor, TensorArchive};
use psconv::tensor::{Rng, Tensor4};

fn main() -> psconv::Result<()> {
    let mut rng = Rng::new(9);
    let mut archive = TensorArchive::new();
    archive.push(NamedTensor::from_tensor4("conv.weight", &Tensor4::randn([4, 4, 3, 3], &mut rng, 1.0)?))?;
    archive.push(NamedTensor {
        name: "scale".into(),
        dtype: DType::F32,
        dims: vec![2],
        data: vec![0.5, -1.25],
    })?;

    let path = std::env::temp_dir().join("psconv_example.psta");
    archive.save(&path)?;
    let back = TensorArchive::load(&path)?;
    println!("{} tensors, identical: {}", back.len(), back == archive);

    let mut bytes = archive.to_bytes()?;
    bytes[3] = b'B';
    let err = read_archive(&bytes).unwrap_err();
    println!("corrupt magic -> {err} (code {})", err.code());
    let err = read_archive(&archive.to_bytes()?[..40]).unwrap_err();
    println!("cut short     -> {err} (code {})", err.code());
    std::fs::remove_file(path)?;
    Ok(())
}
