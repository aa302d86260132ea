//! NIfTI-1 single-file images assembled byte by byte from the header layout.

pub struct Header {
    /// (x, y, z) as stored on disk.
    pub dims: [i16; 3],
    pub datatype: i16,
    pub bitpix: i16,
    /// (x, y, z) voxel sizes.
    pub pixdim: [f32; 3],
    pub slope: f32,
    pub inter: f32,
    pub magic: [u8; 4],
}

impl Header {
    pub fn new(dims: [i16; 3], datatype: i16, bitpix: i16) -> Self {
        Header {
            dims,
            datatype,
            bitpix,
            pixdim: [1.0; 3],
            slope: 0.0,
            inter: 0.0,
            magic: *b"n+1\0",
        }
    }
}

fn put<const N: usize>(buf: &mut [u8], at: usize, bytes: [u8; N]) {
    buf[at..at + N].copy_from_slice(&bytes);
}

/// 348-byte header, 4 extension bytes, then `payload`.
pub fn file(h: &Header, payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    put(&mut b, 0, 348i32.to_le_bytes());
    let dim = [3, h.dims[0], h.dims[1], h.dims[2], 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut b, 40 + 2 * i, d.to_le_bytes());
    }
    put(&mut b, 70, h.datatype.to_le_bytes());
    put(&mut b, 72, h.bitpix.to_le_bytes());
    let pix = [
        1.0f32,
        h.pixdim[0],
        h.pixdim[1],
        h.pixdim[2],
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pix.iter().enumerate() {
        put(&mut b, 76 + 4 * i, p.to_le_bytes());
    }
    put(&mut b, 108, 352f32.to_le_bytes());
    put(&mut b, 112, h.slope.to_le_bytes());
    put(&mut b, 116, h.inter.to_le_bytes());
    b[344..348].copy_from_slice(&h.magic);
    b.extend_from_slice(payload);
    b
}

pub fn f32s(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn i16s(v: &[i16]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Index of disk voxel (x, y, z) in a (z, y, x) grid of the given disk dims.
pub fn zyx_index(disk: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (z * disk[1] + y) * disk[0] + x
}
