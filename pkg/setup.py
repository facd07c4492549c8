# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)


from setuptools import setup

install_requires = [
    "numpy>=1.22",
    "scipy",
    "PyYAML",
    "click",
    "matplotlib>=3.5",
]

tests_require = [
    "pytest",
]


setup(
    name="amc_shapft",
    version="0.1.0",
    description="Adversarial robustness workbench for modulation classifiers",
    long_description="""
    Synthesize, attack, explain and defend a CNN-LSTM modulation classifier
    via YAML configuration.
    This tool is able to:

    * generate labelled IQ frames for a set of modulation schemes
    * train the classifier and FGSM-attack it
    * compute expected-gradients attributions of the attacked frames
    * prune negative-attribution sampling points and fine-tune (SHAP-FT)
    * compare SHAP-FT against adversarial training and plain fine-tuning

    """,
    install_requires=install_requires,
    tests_require=tests_require,
    extras_require={"test": tests_require},
    packages=[
        "amc_shapft",
        "amc_shapft.cli",
        "amc_shapft.tools",
    ],
    include_package_data=True,
    license="AGPL-3",
    classifiers=[
        "Development Status :: 4 - Beta",
        "License :: OSI Approved :: GNU Affero General Public License v3",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering",
    ],
    zip_safe=False,
    entry_points={
        "console_scripts": [
            "amc-shapft = amc_shapft.cli.main:cli",
        ]
    },
)
