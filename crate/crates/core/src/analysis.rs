//! Static propagation of receptive field, jump, feature shape and activation
//! memory through a [`NetworkSpec`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::spec::{LayerKind, NetworkSpec, Part, RfVariant, IMAGE};
use crate::volume::{Shape, Triple};

pub const BYTES_PER_VALUE: usize = 4;
pub const MIB: f64 = (1 << 20) as f64;

/// Activation tensors a ResBlock materializes without in-place computation.
pub const RESBLOCK_NODES: usize = 9;
/// Convolutions inside one ResBlock on the receptive-field path.
pub const RESBLOCK_CONVS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub name: String,
    pub kind: LayerKind,
    pub part: Part,
    pub rf: Triple,
    pub jump: Triple,
    pub out_shape: Shape,
    pub node_count: usize,
    pub footprint_mib: f64,
}

pub fn footprint_mib(node_count: usize, shape: Shape) -> f64 {
    (node_count * shape.len() * BYTES_PER_VALUE) as f64 / MIB
}

fn node_count(kind: LayerKind) -> usize {
    match kind {
        LayerKind::ResBlock => RESBLOCK_NODES,
        _ => 1,
    }
}

/// Analyze every layer with the encoder at `input` and RoI crops of level-I
/// size `roi`.
pub fn analyze(spec: &NetworkSpec, input: Triple, roi: Triple) -> Result<Vec<LayerAnalysis>> {
    spec.validate()?;
    let mut seen: HashMap<&str, (Triple, Triple, Shape)> =
        HashMap::from([(IMAGE, ([1, 1, 1], [1, 1, 1], Shape::spatial(input)))]);
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let (rf0, jump0, shape0) = seen[l.inputs[0].as_str()];
        let mut rf = rf0;
        let mut jump = jump0;
        let mut dims = shape0.dims();
        match l.kind {
            LayerKind::ResBlock | LayerKind::Head => {
                let convs = if l.kind == LayerKind::ResBlock { RESBLOCK_CONVS } else { 1 };
                for a in 0..3 {
                    rf[a] += convs * (l.kernel[a] - 1) * l.dilation[a] * jump[a];
                }
            }
            LayerKind::MaxPool => {
                for (a, axis) in ["d", "h", "w"].into_iter().enumerate() {
                    if dims[a] % l.stride[a] != 0 {
                        return Err(Error::NotDivisible {
                            axis,
                            len: dims[a],
                            stride: l.stride[a],
                        });
                    }
                    rf[a] += (l.kernel[a] - 1) * jump[a];
                    jump[a] *= l.stride[a];
                    dims[a] /= l.stride[a];
                }
            }
            LayerKind::UpConv => {
                for a in 0..3 {
                    jump[a] = (jump[a] / l.stride[a]).max(1);
                    dims[a] *= l.stride[a];
                }
            }
            LayerKind::Add => {
                for other in &l.inputs[1..] {
                    let (rf1, _, s1) = seen[other.as_str()];
                    if s1.dims() != dims {
                        return Err(Error::InvalidShape(format!(
                            "`{}` adds {:?} to {:?}",
                            l.name,
                            dims,
                            s1.dims()
                        )));
                    }
                    rf = [0, 1, 2].map(|a| rf[a].max(rf1[a]));
                }
            }
            LayerKind::RoiCrop => {
                for (a, axis) in ["d", "h", "w"].into_iter().enumerate() {
                    if roi[a] % jump[a] != 0 {
                        return Err(Error::NotDivisible {
                            axis,
                            len: roi[a],
                            stride: jump[a],
                        });
                    }
                    dims[a] = roi[a] / jump[a];
                }
            }
        }
        let shape = Shape::new(1, l.out_channels, dims[0], dims[1], dims[2]);
        let nodes = node_count(l.kind);
        seen.insert(&l.name, (rf, jump, shape));
        out.push(LayerAnalysis {
            name: l.name.clone(),
            kind: l.kind,
            part: l.part,
            rf,
            jump,
            out_shape: shape,
            node_count: nodes,
            footprint_mib: footprint_mib(nodes, shape),
        });
    }
    Ok(out)
}

/// Decoder layers evaluated on the uncropped feature maps.
pub fn analyze_standard_decoder(spec: &NetworkSpec, input: Triple) -> Result<Vec<LayerAnalysis>> {
    Ok(analyze(spec, input, input)?
        .into_iter()
        .filter(|l| l.part == Part::Decoder)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Encoder,
    RoiPyramid,
    LocalDecoder,
    StandardDecoder,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::Encoder,
        Section::RoiPyramid,
        Section::LocalDecoder,
        Section::StandardDecoder,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Section::Encoder => "Encoder",
            Section::RoiPyramid => "RoI Tensor Pyramid",
            Section::LocalDecoder => "Local Region Decoder",
            Section::StandardDecoder => "Standard Decoder",
        }
    }
}

/// Round to the 2-decimal figure a report prints.
pub fn hundredths(mib: f64) -> i64 {
    (mib * 100.0).round() as i64
}

/// Part total as printed: the sum of the rounded rows.
pub fn section_total(rows: &[&LayerAnalysis]) -> f64 {
    rows.iter().map(|r| hundredths(r.footprint_mib)).sum::<i64>() as f64 / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rf_variant: RfVariant,
    pub input: Triple,
    pub roi: Triple,
    pub layers: Vec<LayerAnalysis>,
    pub standard_decoder: Vec<LayerAnalysis>,
}

impl AnalysisReport {
    pub fn new(spec: &NetworkSpec, input: Triple, roi: Triple) -> Result<Self> {
        Ok(AnalysisReport {
            rf_variant: spec.rf_variant,
            input,
            roi,
            layers: analyze(spec, input, roi)?,
            standard_decoder: analyze_standard_decoder(spec, input)?,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerAnalysis> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn rows(&self, section: Section) -> Vec<&LayerAnalysis> {
        let part = match section {
            Section::StandardDecoder => return self.standard_decoder.iter().collect(),
            Section::Encoder => Part::Encoder,
            Section::RoiPyramid => Part::RoiPyramid,
            Section::LocalDecoder => Part::Decoder,
        };
        self.layers.iter().filter(|l| l.part == part).collect()
    }

    pub fn total(&self, section: Section) -> f64 {
        section_total(&self.rows(section))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_table(&self) -> String {
        let dims = |t: Triple| format!("{}x{}x{}", t[0], t[1], t[2]);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "variant {}  input {}  roi {}",
            self.rf_variant,
            dims(self.input),
            dims(self.roi)
        );
        for section in Section::ALL {
            let _ = writeln!(s, "\n{}", section.title());
            let _ = writeln!(
                s,
                "  {:<12} {:>12} {:>10} {:>22} {:>12}",
                "layer", "rf", "jump", "size", "MiB"
            );
            for r in self.rows(section) {
                let o = r.out_shape;
                let rf = match r.kind {
                    LayerKind::MaxPool | LayerKind::UpConv | LayerKind::Add => "-".to_string(),
                    _ => dims(r.rf),
                };
                let _ = writeln!(
                    s,
                    "  {:<12} {:>12} {:>10} {:>22} {:>12.2}",
                    r.name,
                    rf,
                    dims(r.jump),
                    format!("{}x{}x{}", r.node_count, dims(o.dims()), o.c),
                    r.footprint_mib
                );
            }
            let _ = writeln!(s, "  {:<12} {:>71.2}", "total", self.total(section));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn report(r: &AnalysisReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => r.to_table(),
        ReportFormat::Json => r.to_json(),
    }
}

/// Checked-in reference tables.
pub mod golden {
    use serde::Deserialize;

    use super::*;

    pub const RECEPTIVE_FIELDS_JSON: &str = include_str!("../golden/receptive_fields.json");
    pub const FOOTPRINTS_JSON: &str = include_str!("../golden/footprints.json");

    #[derive(Clone, Debug, Deserialize)]
    pub struct RfRow {
        pub layer: String,
        pub rf64: Triple,
        pub rf88: Triple,
        pub rf112: Triple,
    }

    impl RfRow {
        pub fn expected(&self, v: RfVariant) -> Triple {
            match v {
                RfVariant::Rf64 => self.rf64,
                RfVariant::Rf88 => self.rf88,
                RfVariant::Rf112 => self.rf112,
            }
        }
    }

    #[derive(Clone, Debug, Deserialize)]
    pub struct FootprintRow {
        pub section: Section,
        pub layer: String,
        pub nodes: usize,
        pub dims: Triple,
        pub channels: usize,
        pub mib: f64,
    }

    #[derive(Clone, Debug, Deserialize)]
    pub struct SectionTotal {
        pub section: Section,
        pub mib: f64,
    }

    #[derive(Clone, Debug, Deserialize)]
    pub struct Footprints {
        pub input: Triple,
        pub roi: Triple,
        pub rows: Vec<FootprintRow>,
        pub totals: Vec<SectionTotal>,
    }

    pub fn receptive_fields() -> Vec<RfRow> {
        serde_json::from_str(RECEPTIVE_FIELDS_JSON).expect("checked-in table parses")
    }

    pub fn footprints() -> Footprints {
        serde_json::from_str(FOOTPRINTS_JSON).expect("checked-in table parses")
    }

    /// Every receptive-field disagreement between `report` and the table.
    pub fn check_receptive_fields(report: &AnalysisReport) -> Vec<String> {
        let mut bad = Vec::new();
        for row in receptive_fields() {
            let want = row.expected(report.rf_variant);
            match report.layer(&row.layer) {
                Some(l) if l.rf == want => {}
                Some(l) => bad.push(format!(
                    "{} {}: rf {:?}, table {:?}",
                    report.rf_variant, row.layer, l.rf, want
                )),
                None => bad.push(format!("{}: layer missing", row.layer)),
            }
        }
        bad
    }

    /// Every footprint disagreement beyond one hundredth of a MiB.
    pub fn check_footprints(report: &AnalysisReport) -> Vec<String> {
        let table = footprints();
        let mut bad = Vec::new();
        if report.input != table.input || report.roi != table.roi {
            bad.push(format!(
                "report geometry {:?}/{:?} differs from table {:?}/{:?}",
                report.input, report.roi, table.input, table.roi
            ));
            return bad;
        }
        for row in &table.rows {
            let Some(l) = report.rows(row.section).into_iter().find(|l| l.name == row.layer) else {
                bad.push(format!("{:?} {}: layer missing", row.section, row.layer));
                continue;
            };
            let o = l.out_shape;
            if l.node_count != row.nodes || o.dims() != row.dims || o.c != row.channels {
                bad.push(format!(
                    "{:?} {}: size {}x{:?}x{}, table {}x{:?}x{}",
                    row.section,
                    row.layer,
                    l.node_count,
                    o.dims(),
                    o.c,
                    row.nodes,
                    row.dims,
                    row.channels
                ));
            }
            if (hundredths(l.footprint_mib) - hundredths(row.mib)).abs() > 1 {
                bad.push(format!(
                    "{:?} {}: {:.4} MiB, table {:.2}",
                    row.section, row.layer, l.footprint_mib, row.mib
                ));
            }
        }
        for t in &table.totals {
            let got = report.total(t.section);
            if (hundredths(got) - hundredths(t.mib)).abs() > 1 {
                bad.push(format!("{:?} total: {got:.2} MiB, table {:.2}", t.section, t.mib));
            }
        }
        bad
    }
}
