//! Scratch scan: Var(g) at init across cell/chain instantiations.

use archsec_core::data::{load, DataSource, DatasetSpec};
use archsec_core::diagnostics::{gradient_variance, Phase};
use archsec_core::search_space::{
    reference_darts_genotype, CellTemplate, Genotype, NetworkTemplate, OpKind,
};
use archsec_core::{ModelArch, Network, RefArch};

fn main() {
    let spec = DatasetSpec {
        source: DataSource::Synthetic {
            num_classes: 10,
            height: 12,
            width: 12,
            channels: 3,
            train_per_class: 30,
            test_per_class: 5,
            noise: 0.45,
            seed: 31,
        },
        train_limit: None,
        test_limit: None,
        subset_seed: 0,
    };
    let data = load(&spec).unwrap();
    let sample = data.train.subsample(48, 0x7A12);
    let dims = data.train.dims;
    let classes = data.train.num_classes;

    let mut report = |name: &str, arch: ModelArch| {
        let mut vars = Vec::new();
        let mut params = 0;
        for seed in [3u64, 4, 5] {
            let net = Network::new(arch.clone(), seed).unwrap();
            params = net.param_count();
            vars.push(gradient_variance(&net, &sample, Phase::Init, name).unwrap().var_g);
        }
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        println!("{name:40} params {params:6}  var {mean:12.4e}  (seeds: {vars:?})");
        (params, mean)
    };

    // Maximally shallow genotype: every node reads both cell inputs.
    let shallow = |op: OpKind, n_mid: usize| Genotype {
        normal: (0..n_mid).map(|_| vec![(op, 0), (op, 1)]).collect(),
        reduce: (0..n_mid).map(|_| vec![(op, 0), (op, 1)]).collect(),
    };

    for (name, gen, nw) in [
        ("cell ref-genotype w8", reference_darts_genotype(), 8),
        ("cell shallow sep3 w8", shallow(OpKind::SepConv3x3, 4), 8),
        ("cell shallow sep3 w16", shallow(OpKind::SepConv3x3, 4), 16),
        ("cell shallow avgpool w8", shallow(OpKind::AvgPool3x3, 4), 8),
        ("cell shallow dil3 w8", shallow(OpKind::DilConv3x3, 4), 8),
    ] {
        let cell = CellTemplate { node_width: nw, ..CellTemplate::default() };
        report(
            name,
            ModelArch::CellNet {
                cell,
                net: NetworkTemplate {
                    n_cells: 1,
                    reduction_positions: vec![],
                    stem_width: 8,
                    num_classes: classes,
                    input_dims: dims,
                },
                genotype: gen,
            },
        );
    }

    for (width, depth) in [(8, 4), (6, 6), (4, 8), (4, 12), (3, 16), (3, 20), (2, 24)] {
        report(
            &format!("chain w{width} d{depth}"),
            ModelArch::Reference {
                arch: RefArch::Chain { width, depth },
                input_dims: dims,
                num_classes: classes,
            },
        );
    }
    for (width, blocks) in [(4, 4), (4, 8), (3, 10)] {
        report(
            &format!("residual w{width} b{blocks}"),
            ModelArch::Reference {
                arch: RefArch::Residual { width, blocks },
                input_dims: dims,
                num_classes: classes,
            },
        );
    }
}
