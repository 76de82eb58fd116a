//! Pack a token grid into the `.qltk` container and read it back.

use qlip::tokcodec::{load_qltk, read_bitstream, save_qltk, write_bitstream, TokenGrid};

fn main() -> qlip::Result<()> {
    let grid = TokenGrid::new(2, 3, 12, vec![0, 1, 4095, 2048, 7, 100])?;
    let bytes = write_bitstream(&grid)?;
    println!("{} tokens x {} bits -> {} bytes", grid.ids.len(), grid.bits, bytes.len());
    println!("{}", bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "));
    assert_eq!(read_bitstream(&bytes).expect("valid stream"), grid);

    let path = std::env::temp_dir().join("qlip-example.qltk");
    save_qltk(&path, &grid)?;
    assert_eq!(load_qltk(&path)?, grid);
    println!("roundtrip through {} ok", path.display());

    let mut truncated = bytes.clone();
    truncated.pop();
    println!("reading a short buffer fails: {}", read_bitstream(&truncated).unwrap_err());
    Ok(())
}
