use cxrnet::arch::{build_arch_with_top, CostReport, Top, Variant};

fn main() {
    for v in Variant::ALL {
        let spec = build_arch_with_top(v, 1000, true, Top::ImageNet).unwrap();
        let r = CostReport::for_spec(&spec);
        println!(
            "{v}  res={}  params={}  macs={}  mem={:.1} MiB",
            spec.input_resolution,
            r.param_count,
            r.mac_count,
            r.memory_mib()
        );
    }
}
