from setuptools import setup

with open("README.md", "r") as fh:
    long_description = fh.read()

setup(
    name='pyspacedet',
    version='0.1.0',
    packages=['pyspacedet', 'pyspacedet.test'],
    scripts=[],
    description='Synthetic LWIR spacecraft detection datasets, detection and segmentation metrics, '
                'track-based background rejection, feature distillation and latency benchmarking.',
    long_description=long_description,
    long_description_content_type="text/markdown",
    include_package_data=True,
    entry_points={
        'console_scripts': [
            'pyspacedet = pyspacedet.main:CommandLine',
        ],
    },
    install_requires=['imageio',
                      'matplotlib',
                      'numpy>1.19.1',
                      'pandas',
                      'Pillow',
                      'pycocotools',
                      'scikit-image',
                      'scipy',
                      'tomli; python_version < "3.11"',
                      ],
    package_dir={'pyspacedet': 'pyspacedet'},
    test_suite="pyspacedet.test",
)
