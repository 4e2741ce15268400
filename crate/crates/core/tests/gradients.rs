mod common;

use common::op_gradient_suite;
use voxcascade::nets::{check_network_gradients, Arch, Network, NetworkConfig};
use voxcascade::tensor::NdArray;

#[test]
fn every_op_passes_finite_differences() {
    for (op, err) in op_gradient_suite(3) {
        assert!(err < 1e-5, "{op}: relative error {err}");
    }
}

fn tiny(arch: Arch) -> NetworkConfig {
    let mut cfg = match arch {
        Arch::PlainUnet => NetworkConfig::localization(),
        Arch::ResDsUnet => NetworkConfig::segmentation(),
    };
    cfg.base_filters = 2;
    cfg.patch_size = [8, 16, 16];
    cfg.poolings_per_axis = [1, 2, 2];
    cfg.ds_levels = cfg.ds_levels.min(2);
    cfg
}

#[test]
fn both_networks_pass_end_to_end_finite_differences() {
    for arch in [Arch::PlainUnet, Arch::ResDsUnet] {
        let cfg = tiny(arch);
        let net = Network::<f64>::build(&cfg, 21).unwrap();
        let x = NdArray::randn(vec![1, cfg.in_channels, 8, 16, 16], 1.0, &mut common::rng(4));
        let rep = check_network_gradients(&net, &x, 1e-4, 8, Some(5)).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{arch:?}: {rep:?}");
    }
}
