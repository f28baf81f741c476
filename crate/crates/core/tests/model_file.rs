use tempodet_core::net3d::io::{load_model, save_model};
use tempodet_core::net3d::model::{ArchConfig, NetParams};

/// Parameter count of the desk network worked out by hand: eight 3×3×3
/// convolutions, a 1×1×1×32 pool5 output, two 128-wide dense layers and the
/// five heads (prop 2, cls N+1, reg 1, two auxiliary N+1).
fn desk_param_count(n: usize) -> usize {
    let chans = [3, 4, 8, 16, 16, 32, 32, 32, 32];
    let conv: usize = chans.windows(2).map(|w| w[0] * w[1] * 27 + w[1]).sum();
    let dense = |i: usize, o: usize| i * o + o;
    let cats = n + 1;
    conv + dense(32, 128)
        + dense(128, 128)
        + dense(128, 2)
        + dense(128, cats)
        + dense(128, 1)
        + dense(32, cats)
        + dense(128, cats)
}

#[test]
fn saved_model_size_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for n in [1, 3, 5] {
        let arch = ArchConfig::desk(n);
        let params = NetParams::init(&arch, n as u64).unwrap();
        assert_eq!(params.num_params(), desk_param_count(n));
        assert_eq!(arch.num_params().unwrap(), desk_param_count(n));

        let path = dir.path().join(format!("m{n}.tdmdl"));
        let written = save_model(&params, &arch, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(written as usize, bytes.len());
        let header = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + header + 8 * desk_param_count(n));

        let (arch2, params2) = load_model(&path).unwrap();
        assert_eq!(arch2, arch);
        assert_eq!(params2, params);
    }
}
