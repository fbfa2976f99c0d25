//! Helpers shared by the integration tests, including an independent
//! layer-by-layer enumeration of the network's parameters.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fsid_core::network::Ablation;
use fsid_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Shapes = BTreeMap<String, Vec<usize>>;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn conv(m: &mut Shapes, name: &str, cin: usize, cout: usize, k: usize) {
    m.insert(format!("{name}.weight"), vec![cout, cin, k, k]);
    m.insert(format!("{name}.bias"), vec![cout]);
}

struct Variant {
    spatial: bool,
    frequency: bool,
    interaction: bool,
    cross_scale1: bool,
    cross_scale2: bool,
    dfb_inputs: Option<usize>,
}

/// The ablation table: which pieces each variant keeps.
fn variant(a: Ablation) -> Variant {
    let full = Variant {
        spatial: true,
        frequency: true,
        interaction: true,
        cross_scale1: true,
        cross_scale2: true,
        dfb_inputs: Some(3),
    };
    match a {
        Ablation::Full => full,
        Ablation::Model1SpatialOnly => Variant {
            frequency: false,
            interaction: false,
            ..full
        },
        Ablation::Model2FrequencyOnly => Variant {
            spatial: false,
            interaction: false,
            ..full
        },
        Ablation::Model3NoInteraction => Variant {
            interaction: false,
            ..full
        },
        Ablation::Model4NoIem => Variant {
            cross_scale1: false,
            cross_scale2: false,
            dfb_inputs: None,
            ..full
        },
        Ablation::Model5CrossStageOnly => Variant {
            cross_scale1: false,
            cross_scale2: false,
            ..full
        },
        Ablation::Model6CrossScaleOnly => Variant {
            cross_scale1: false,
            dfb_inputs: Some(2),
            ..full
        },
    }
}

fn block(m: &mut Shapes, p: &str, c: usize, v: &Variant) {
    for i in 1..=2 {
        if v.spatial {
            conv(m, &format!("{p}.spatial{i}.conv1"), c, c, 3);
            conv(m, &format!("{p}.spatial{i}.conv2"), c, c, 3);
        }
        if v.frequency {
            for layer in ["pre", "op1", "op2"] {
                conv(m, &format!("{p}.freq{i}.{layer}"), c, c, 1);
            }
        }
    }
    if v.interaction {
        conv(m, &format!("{p}.interact.w1"), c, c, 3);
        conv(m, &format!("{p}.interact.w2"), c, c, 3);
    }
    let branches = usize::from(v.spatial) + usize::from(v.frequency);
    conv(m, &format!("{p}.fuse"), branches * c, c, 1);
}

fn stage(m: &mut Shapes, p: &str, c: usize, v: &Variant, skips: bool) {
    conv(m, &format!("{p}.in_conv"), 3, c, 3);
    let units = [
        ("enc0", c),
        ("enc1", 2 * c),
        ("enc2", 4 * c),
        ("bottleneck", 4 * c),
        ("dec2", 4 * c),
        ("dec1", 2 * c),
        ("dec0", c),
    ];
    for (name, ch) in units {
        block(m, &format!("{p}.{name}"), ch, v);
    }
    conv(m, &format!("{p}.down0"), c, 2 * c, 3);
    conv(m, &format!("{p}.down1"), 2 * c, 4 * c, 3);
    conv(m, &format!("{p}.up0"), 2 * c, c, 3);
    conv(m, &format!("{p}.up1"), 4 * c, 2 * c, 3);
    if skips {
        conv(m, &format!("{p}.skip0"), 2 * c, c, 1);
        conv(m, &format!("{p}.skip1"), 4 * c, 2 * c, 1);
    }
    conv(m, &format!("{p}.out_conv"), c, 3, 3);
}

fn cross_scale(m: &mut Shapes, p: &str, c: usize) {
    let ch = [c, 2 * c, 4 * c];
    for (i, ci) in ch.iter().enumerate() {
        conv(m, &format!("{p}.level{i}"), *ci, *ci, 3);
        conv(m, &format!("{p}.fuse{i}"), 7 * c, *ci, 1);
    }
    for (from, to) in [(0, 1), (0, 2), (1, 2)] {
        conv(m, &format!("{p}.down{from}to{to}"), ch[from], ch[from], 3);
    }
}

/// Every parameter name with its shape, as the architecture describes it.
pub fn expected_shapes(a: Ablation, c: usize) -> Shapes {
    let v = variant(a);
    let mut m = Shapes::new();
    stage(&mut m, "stage1", c, &v, true);
    stage(&mut m, "stage2", c, &v, false);
    if v.cross_scale1 {
        cross_scale(&mut m, "iem.cross_scale1", c);
    }
    if v.cross_scale2 {
        cross_scale(&mut m, "iem.cross_scale2", c);
    }
    if let Some(inputs) = v.dfb_inputs {
        for s in 0..3 {
            let cs = c << s;
            let p = format!("iem.dfb{s}");
            conv(&mut m, &format!("{p}.fuse"), inputs * cs, cs, 1);
            m.insert(format!("{p}.spatial.weight"), vec![cs, 1, 3, 3]);
            m.insert(format!("{p}.spatial.bias"), vec![cs]);
            conv(&mut m, &format!("{p}.channel"), cs, cs, 1);
            conv(&mut m, &format!("{p}.kernel"), cs, 9, 1);
        }
    }
    m
}

pub fn expected_names(a: Ablation, c: usize) -> BTreeSet<String> {
    expected_shapes(a, c).into_keys().collect()
}

pub fn expected_count(a: Ablation, c: usize) -> usize {
    expected_shapes(a, c).values().map(|s| s.iter().product::<usize>()).sum()
}
