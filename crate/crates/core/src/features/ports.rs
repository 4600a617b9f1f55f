//! Port discretization schemes.

use std::fmt;
use std::ops::RangeInclusive;

/// IANA port ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortRange {
    System,
    User,
    Dynamic,
}

impl PortRange {
    pub const ALL: [PortRange; 3] = [PortRange::System, PortRange::User, PortRange::Dynamic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PortRange::System => "system",
            PortRange::User => "user",
            PortRange::Dynamic => "dynamic",
        }
    }
}

pub fn discretize_three_range(port: u16) -> PortRange {
    match port {
        0..=1023 => PortRange::System,
        1024..=49151 => PortRange::User,
        _ => PortRange::Dynamic,
    }
}

/// One bin of the generalization hierarchy.
pub struct PortBin {
    pub name: &'static str,
    pub ports: &'static [RangeInclusive<u16>],
}

impl PortBin {
    pub fn contains(&self, port: u16) -> bool {
        self.ports.iter().any(|r| r.contains(&port))
    }
}

impl fmt::Debug for PortBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

macro_rules! ports {
    ($($lo:literal $(..= $hi:literal)?),* $(,)?) => {
        &[$(ports!(@one $lo $(..= $hi)?)),*]
    };
    (@one $lo:literal ..= $hi:literal) => { $lo..=$hi };
    (@one $lo:literal) => { $lo..=$lo };
}

/// Port generalization hierarchy. Earlier bins take precedence; the last two
/// bins together cover every port.
pub static PORT_HIERARCHY: [PortBin; 24] = [
    PortBin { name: "mqttPorts", ports: ports![1883, 8883] },
    PortBin { name: "coapPorts", ports: ports![5683, 5684] },
    PortBin { name: "rtspPorts", ports: ports![8554, 8322, 8000..=8003, 1935, 8888] },
    PortBin {
        name: "httpPorts",
        ports: ports![80, 280, 443, 591, 593, 777, 488, 1183, 1184, 2069, 2301, 2381, 8008, 8080],
    },
    PortBin {
        name: "mailPorts",
        ports: ports![24, 25, 50, 58, 61, 109, 110, 143, 158, 174, 209, 220, 406, 512, 585, 993, 995],
    },
    PortBin { name: "dnsPorts", ports: ports![42, 53, 81, 101, 105, 261] },
    PortBin {
        name: "ftpPorts",
        ports: ports![20, 21, 47, 69, 115, 152, 189, 349, 574, 662, 989, 990],
    },
    PortBin {
        name: "shellPorts",
        ports: ports![22, 23, 59, 87, 89, 107, 211, 221, 222, 513, 614, 759, 992],
    },
    PortBin { name: "remoteExecPorts", ports: ports![512, 514] },
    PortBin { name: "authPorts", ports: ports![13, 56, 113, 316, 353, 370, 749, 750] },
    PortBin { name: "passwordPorts", ports: ports![229, 464, 586, 774] },
    PortBin { name: "newsPorts", ports: ports![114, 119, 532, 563] },
    PortBin { name: "chatPorts", ports: ports![194, 258, 531, 994] },
    PortBin { name: "printPorts", ports: ports![35, 92, 170, 515, 631] },
    PortBin { name: "timePorts", ports: ports![13, 37, 52, 123, 519, 525] },
    PortBin { name: "dbmsPorts", ports: ports![65, 66, 118, 150, 156, 217] },
    PortBin { name: "dhcpPorts", ports: ports![546, 547, 647, 847] },
    PortBin { name: "whoisPorts", ports: ports![43, 63] },
    PortBin { name: "netbiosPorts", ports: ports![137..=139] },
    PortBin { name: "kerberosPorts", ports: ports![88, 748, 750] },
    PortBin { name: "RPCPorts", ports: ports![111, 121, 369, 530, 567, 593, 602] },
    PortBin { name: "snmpPorts", ports: ports![161, 162, 391] },
    PortBin { name: "privilegedPorts", ports: ports![0..=1023] },
    PortBin { name: "nonprivilegedPorts", ports: ports![1024..=65535] },
];

/// Index into [`PORT_HIERARCHY`] of the first bin containing `port`.
pub fn hierarchical_index(port: u16) -> usize {
    PORT_HIERARCHY
        .iter()
        .position(|b| b.contains(port))
        .expect("catch-all bins cover every port")
}

pub fn discretize_hierarchical(port: u16) -> &'static str {
    PORT_HIERARCHY[hierarchical_index(port)].name
}
