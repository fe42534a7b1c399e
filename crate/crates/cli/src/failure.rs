use std::fmt;
use std::io;
use std::path::Path;

use cropmap_core::assess::AssessError;
use cropmap_core::cluster::ClusterError;
use cropmap_core::forest::ForestError;
use cropmap_core::geometry::GeometryError;
use cropmap_core::mapping::MappingError;
use cropmap_core::pipeline::PipelineError;
use cropmap_core::synth::SynthError;
use cropmap_core::tilestore::TileError;

/// Process exit codes. clap uses 2 for usage errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other = 1,
    MissingFile = 3,
    Format = 4,
    Dimension = 5,
    Invalid = 6,
}

impl Kind {
    fn label(self) -> &'static str {
        match self {
            Kind::Other => "error",
            Kind::MissingFile => "missing file",
            Kind::Format => "format error",
            Kind::Dimension => "dimension mismatch",
            Kind::Invalid => "invalid input",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub msg: String,
}

impl Failure {
    pub fn new(kind: Kind, msg: impl Into<String>) -> Self {
        Failure { kind, msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Failure::new(Kind::Invalid, msg)
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(mut self, path: &Path) -> Self {
        self.msg = format!("{}: {}", path.display(), self.msg);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.label(), self.msg)
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

pub fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(Kind::MissingFile, format!("{} does not exist or is not a file", path.display())))
    }
}

fn io_kind(e: &io::Error) -> Kind {
    if e.kind() == io::ErrorKind::NotFound {
        Kind::MissingFile
    } else {
        Kind::Other
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(io_kind(&e), e.to_string())
    }
}

fn geometry_kind(e: &GeometryError) -> Kind {
    match e {
        GeometryError::Parse { .. } => Kind::Format,
        GeometryError::Io(io) => io_kind(io),
        _ => Kind::Invalid,
    }
}

fn tile_kind(e: &TileError) -> Kind {
    match e {
        TileError::BadMagic(_)
        | TileError::VersionMismatch { .. }
        | TileError::Truncated { .. }
        | TileError::ChecksumMismatch { .. }
        | TileError::Malformed(_)
        | TileError::WrongKind { .. } => Kind::Format,
        TileError::BadQuantization(_) | TileError::Invalid(_) | TileError::NoPointsSampled { .. } => Kind::Invalid,
        TileError::Geometry(g) => geometry_kind(g),
        TileError::Io(io) => io_kind(io),
    }
}

fn forest_kind(e: &ForestError) -> Kind {
    match e {
        ForestError::DimensionMismatch { .. } | ForestError::TrainingSetMismatch { .. } => Kind::Dimension,
        ForestError::InvalidTree(_)
        | ForestError::BadMagic
        | ForestError::VersionMismatch(_)
        | ForestError::Truncated
        | ForestError::ChecksumMismatch { .. }
        | ForestError::Malformed(_) => Kind::Format,
        ForestError::Io(io) => io_kind(io),
        _ => Kind::Invalid,
    }
}

fn cluster_kind(e: &ClusterError) -> Kind {
    match e {
        ClusterError::DimensionMismatch { .. } => Kind::Dimension,
        ClusterError::Malformed(_) => Kind::Format,
        ClusterError::Tile(t) => tile_kind(t),
        ClusterError::Io(io) => io_kind(io),
        _ => Kind::Invalid,
    }
}

fn mapping_kind(e: &MappingError) -> Kind {
    match e {
        MappingError::DimensionMismatch { .. } => Kind::Dimension,
        MappingError::WrongKind { .. } | MappingError::PaletteParse { .. } => Kind::Format,
        MappingError::Encode(_) => Kind::Other,
        MappingError::Tile(t) => tile_kind(t),
        MappingError::Io(io) => io_kind(io),
        _ => Kind::Invalid,
    }
}

fn synth_kind(e: &SynthError) -> Kind {
    match e {
        SynthError::Csv(_) | SynthError::BadPoints(_) => Kind::Format,
        SynthError::Tile(t) => tile_kind(t),
        SynthError::Io(io) => io_kind(io),
        _ => Kind::Invalid,
    }
}

fn assess_kind(e: &AssessError) -> Kind {
    match e {
        AssessError::NotBinary(_) => Kind::Format,
        AssessError::GridMismatch => Kind::Dimension,
        _ => Kind::Invalid,
    }
}

fn pipeline_kind(e: &PipelineError) -> Kind {
    match e {
        PipelineError::Config(_) => Kind::Invalid,
        PipelineError::Tile(x) => tile_kind(x),
        PipelineError::Geometry(x) => geometry_kind(x),
        PipelineError::Synth(x) => synth_kind(x),
        PipelineError::Cluster(x) => cluster_kind(x),
        PipelineError::Forest(x) => forest_kind(x),
        PipelineError::Mapping(x) => mapping_kind(x),
        PipelineError::Assess(x) => assess_kind(x),
        PipelineError::Io { source, .. } => io_kind(source),
    }
}

macro_rules! failure_from {
    ($($err:ty => $kind:ident),* $(,)?) => {
        $(impl From<$err> for Failure {
            fn from(e: $err) -> Self {
                Failure::new($kind(&e), e.to_string())
            }
        })*
    };
}

failure_from! {
    GeometryError => geometry_kind,
    TileError => tile_kind,
    ForestError => forest_kind,
    ClusterError => cluster_kind,
    MappingError => mapping_kind,
    SynthError => synth_kind,
    AssessError => assess_kind,
    PipelineError => pipeline_kind,
}
